//! Multilayer perceptrons with a (leaky) ReLU on every hidden layer and an
//! affine output layer.
//!
//! A network is a stack of [`LayerParams`]; layer `ℓ` computes
//! `z = W x + b` and every layer but the last applies `σ(z)`, where
//! `σ(u) = u` for `u ≥ 0` and `α u` otherwise. On the set of inputs that
//! share one [`ActivationPattern`] the network is exactly affine, and
//! [`MlpNetwork::extract_affine`] returns that map in closed form.
//!
//! Evaluation is batched: points are stacked as matrix rows and pushed through
//! each layer with one matrix product. The single-point entry points are thin
//! wrappers around the batched ones.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Vector};
use crate::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Sign of a hidden unit's pre-activation. Zero counts as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn of<T: Real>(z: T) -> Sign {
        if z >= T::zero() {
            Sign::Positive
        } else {
            Sign::Negative
        }
    }

    pub fn value<T: Real>(self) -> T {
        match self {
            Sign::Positive => T::one(),
            Sign::Negative => -T::one(),
        }
    }

    pub fn flipped(self) -> Sign {
        match self {
            Sign::Positive => Sign::Negative,
            Sign::Negative => Sign::Positive,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Sign::Positive => 1,
            Sign::Negative => -1,
        }
    }
}

impl Serialize for Sign {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for Sign {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match i64::deserialize(d)? {
            1 => Ok(Sign::Positive),
            -1 => Ok(Sign::Negative),
            other => Err(serde::de::Error::custom(format!(
                "sign must be +1 or -1, got {other}"
            ))),
        }
    }
}

/// Per-hidden-layer signs of every hidden unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActivationPattern {
    pub layers: Vec<Vec<Sign>>,
}

impl ActivationPattern {
    pub fn new(layers: Vec<Vec<Sign>>) -> Self {
        ActivationPattern { layers }
    }

    pub fn num_neurons(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Number of units whose sign differs from `other`.
    pub fn hamming(&self, other: &Self) -> usize {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count())
            .sum()
    }
}

impl fmt::Display for ActivationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                f.write_str("|")?;
            }
            for s in layer {
                f.write_str(if *s == Sign::Positive { "+" } else { "-" })?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    /// `out_dim × in_dim`.
    pub weights: Matrix<T>,
    pub biases: Vector<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn new(weights: Matrix<T>, biases: Vector<T>) -> Result<Self> {
        if weights.rows() != biases.len() {
            return Err(NetworkError::Shape(format!(
                "{} weight rows but {} biases",
                weights.rows(),
                biases.len()
            )));
        }
        Ok(LayerParams { weights, biases })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork<T> {
    layers: Vec<LayerParams<T>>,
    activation_slope: T,
}

/// Per-point record of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub input: Vector<T>,
    /// `z` of every layer, the output layer included.
    pub pre_activations: Vec<Vector<T>>,
    /// `σ(z)` of every hidden layer.
    pub post_activations: Vec<Vector<T>>,
}

/// Batched forward record; row `i` of every matrix belongs to input row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrace<T> {
    pub input: Matrix<T>,
    pub pre_activations: Vec<Matrix<T>>,
    pub post_activations: Vec<Matrix<T>>,
}

impl<T: Real> BatchTrace<T> {
    pub fn output(&self) -> &Matrix<T> {
        self.pre_activations.last().expect("network has layers")
    }

    /// Input to layer `l`.
    fn layer_input(&self, l: usize) -> &Matrix<T> {
        if l == 0 {
            &self.input
        } else {
            &self.post_activations[l - 1]
        }
    }
}

/// Gradients with the same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vector<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn zeros_like(net: &MlpNetwork<T>) -> Self {
        GradientSet {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: net.layers.iter().map(|l| Vector::zeros(l.out_dim())).collect(),
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a = Matrix::new(
                a.rows(),
                a.cols(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| x + scale * y).collect(),
            )
            .expect("same shape");
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, &y) in a.iter_mut().zip(b.iter()) {
                *x += scale * y;
            }
        }
    }

    /// Flattened in the same order as [`MlpNetwork::params`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }
}

impl<T: Real> MlpNetwork<T> {
    pub fn new(layers: Vec<LayerParams<T>>, activation_slope: T) -> Result<Self> {
        if layers.len() < 2 {
            return Err(NetworkError::InvalidArchitecture(
                "at least one hidden layer is required".into(),
            ));
        }
        if !(activation_slope >= T::zero() && activation_slope <= T::one()) {
            return Err(NetworkError::InvalidArchitecture(format!(
                "activation slope {activation_slope} outside [0, 1]"
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NetworkError::InvalidArchitecture(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.rows() != l.biases.len() {
                return Err(NetworkError::Shape(format!("layer {i}: bias length")));
            }
            if !l.weights.is_finite() || !l.biases.is_finite() {
                return Err(NetworkError::InvalidArchitecture(format!(
                    "layer {i} has non-finite parameters"
                )));
            }
        }
        Ok(MlpNetwork {
            layers,
            activation_slope,
        })
    }

    /// He-initialised network: weights `N(0, 1) · sqrt(2 / fan_in)`, zero biases.
    pub fn init(dims: &[usize], activation_slope: T, seed: u64) -> Result<Self> {
        if dims.len() < 3 {
            return Err(NetworkError::InvalidArchitecture(format!(
                "need input, at least one hidden and an output dimension, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(NetworkError::InvalidArchitecture(format!(
                "zero-width layer in {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        T::of(g * scale)
                    })
                    .collect();
                LayerParams {
                    weights: Matrix::new(fan_out, fan_in, data).expect("sized"),
                    biases: Vector::zeros(fan_out),
                }
            })
            .collect();
        Self::new(layers, activation_slope)
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerParams<T> {
        &mut self.layers[l]
    }

    pub fn activation_slope(&self) -> T {
        self.activation_slope
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn num_hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(LayerParams::out_dim)
            .collect()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(LayerParams::out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data().len() + l.biases.len()).sum()
    }

    /// All parameters, layer by layer, weights (row-major) then biases.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(NetworkError::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.data().len();
            l.weights = Matrix::new(l.out_dim(), l.in_dim(), params[off..off + nw].to_vec())
                .expect("sized");
            off += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn activate(&self, z: T) -> T {
        if z >= T::zero() {
            z
        } else {
            self.activation_slope * z
        }
    }

    /// Slope of `σ` on the branch selected by `sign`; the positive branch at `z = 0`.
    pub fn gain(&self, sign: Sign) -> T {
        match sign {
            Sign::Positive => T::one(),
            Sign::Negative => self.activation_slope,
        }
    }

    fn check_input(&self, d: usize) -> Result<()> {
        if d != self.input_dim() {
            return Err(NetworkError::Shape(format!(
                "input has {d} features, network expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `z = X Wᵀ + 1 bᵀ` for layer `l` applied to row-stacked inputs.
    pub fn layer_preactivations(&self, l: usize, inputs: &Matrix<T>) -> Result<Matrix<T>> {
        let layer = &self.layers[l];
        let mut z = linalg::matmul_transposed(inputs, &layer.weights)?;
        for i in 0..z.rows() {
            for (zi, &bi) in z.row_mut(i).iter_mut().zip(layer.biases.iter()) {
                *zi += bi;
            }
        }
        Ok(z)
    }

    pub fn forward_trace_batch(&self, inputs: &Matrix<T>) -> Result<BatchTrace<T>> {
        self.check_input(inputs.cols())?;
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(last);
        for l in 0..self.layers.len() {
            let x = if l == 0 { inputs } else { &post[l - 1] };
            let z = self.layer_preactivations(l, x)?;
            if l < last {
                post.push(z.map(|v| self.activate(v)));
            }
            pre.push(z);
        }
        Ok(BatchTrace {
            input: inputs.clone(),
            pre_activations: pre,
            post_activations: post,
        })
    }

    pub fn forward_batch(&self, inputs: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(inputs.cols())?;
        let last = self.layers.len() - 1;
        let mut x = inputs.clone();
        for l in 0..self.layers.len() {
            let z = self.layer_preactivations(l, &x)?;
            x = if l < last { z.map(|v| self.activate(v)) } else { z };
        }
        Ok(x)
    }

    pub fn forward(&self, x: &[T]) -> Result<Vector<T>> {
        self.check_input(x.len())?;
        let out = self.forward_batch(&Matrix::new(1, x.len(), x.to_vec())?)?;
        Ok(Vector(out.row(0).to_vec()))
    }

    pub fn forward_trace(&self, x: &[T]) -> Result<(Vector<T>, ForwardTrace<T>)> {
        self.check_input(x.len())?;
        let t = self.forward_trace_batch(&Matrix::new(1, x.len(), x.to_vec())?)?;
        let row = |m: &Matrix<T>| Vector(m.row(0).to_vec());
        let trace = ForwardTrace {
            input: Vector(x.to_vec()),
            pre_activations: t.pre_activations.iter().map(row).collect(),
            post_activations: t.post_activations.iter().map(row).collect(),
        };
        Ok((row(t.output()), trace))
    }

    /// Gradients of `Σ_i g_i · f(x_i)` for output gradients `g` stacked as rows.
    pub fn backward_batch(&self, trace: &BatchTrace<T>, output_grads: &Matrix<T>) -> Result<GradientSet<T>> {
        let n = trace.input.rows();
        if trace.pre_activations.len() != self.layers.len()
            || output_grads.shape() != (n, self.output_dim())
        {
            return Err(NetworkError::Shape(
                "trace or output gradient does not match the network".into(),
            ));
        }
        let mut grads = GradientSet::zeros_like(self);
        let mut delta = output_grads.clone();
        for l in (0..self.layers.len()).rev() {
            let x = trace.layer_input(l);
            grads.weights[l] = linalg::matmul(&delta.transpose(), x)?;
            for i in 0..n {
                for (g, &d) in grads.biases[l].iter_mut().zip(delta.row(i)) {
                    *g += d;
                }
            }
            if l > 0 {
                let mut prev = linalg::matmul(&delta, &self.layers[l].weights)?;
                let z = &trace.pre_activations[l - 1];
                for i in 0..n {
                    for (p, &zv) in prev.row_mut(i).iter_mut().zip(z.row(i)) {
                        *p *= self.gain(Sign::of(zv));
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }

    pub fn backward(&self, trace: &ForwardTrace<T>, output_grad: &[T]) -> Result<GradientSet<T>> {
        if trace.pre_activations.len() != self.layers.len()
            || trace.post_activations.len() != self.layers.len() - 1
        {
            return Err(NetworkError::Shape("trace does not match the network".into()));
        }
        let as_row = |v: &Vector<T>| Matrix::new(1, v.len(), v.0.clone());
        let batch = BatchTrace {
            input: as_row(&trace.input)?,
            pre_activations: trace.pre_activations.iter().map(as_row).collect::<std::result::Result<_, _>>()?,
            post_activations: trace.post_activations.iter().map(as_row).collect::<std::result::Result<_, _>>()?,
        };
        self.backward_batch(&batch, &Matrix::new(1, output_grad.len(), output_grad.to_vec())?)
    }

    /// Pattern of every row of a batch trace.
    pub fn patterns_of(&self, trace: &BatchTrace<T>) -> Vec<ActivationPattern> {
        let hidden = &trace.pre_activations[..self.layers.len() - 1];
        (0..trace.input.rows())
            .map(|i| {
                ActivationPattern::new(
                    hidden
                        .iter()
                        .map(|z| z.row(i).iter().map(|&v| Sign::of(v)).collect())
                        .collect(),
                )
            })
            .collect()
    }

    pub fn activation_pattern_at(&self, x: &[T]) -> Result<ActivationPattern> {
        self.check_input(x.len())?;
        let t = self.forward_trace_batch(&Matrix::new(1, x.len(), x.to_vec())?)?;
        Ok(self.patterns_of(&t).remove(0))
    }

    fn check_pattern(&self, pattern: &ActivationPattern) -> Result<()> {
        if pattern.layers.len() != self.num_hidden_layers()
            || pattern
                .layers
                .iter()
                .zip(self.hidden_widths())
                .any(|(p, w)| p.len() != w)
        {
            return Err(NetworkError::Shape(format!(
                "pattern does not match hidden widths {:?}",
                self.hidden_widths()
            )));
        }
        Ok(())
    }

    /// The affine map `x ↦ Λ x + γ` realised on the polytope of `pattern`.
    pub fn extract_affine(&self, pattern: &ActivationPattern) -> Result<(Matrix<T>, Vector<T>)> {
        self.check_pattern(pattern)?;
        let mut lin = Matrix::identity(self.input_dim());
        let mut off = Vector::zeros(self.input_dim());
        for (l, layer) in self.layers.iter().enumerate() {
            lin = linalg::matmul(&layer.weights, &lin)?;
            let mut c = linalg::matvec(&layer.weights, &off)?;
            for (ci, &bi) in c.iter_mut().zip(layer.biases.iter()) {
                *ci += bi;
            }
            if let Some(signs) = pattern.layers.get(l) {
                for (r, &s) in signs.iter().enumerate() {
                    let g = self.gain(s);
                    for v in lin.row_mut(r) {
                        *v *= g;
                    }
                    c[r] *= g;
                }
            }
            off = c;
        }
        Ok((lin, off))
    }

    /// Same weights in a different scalar type.
    pub fn cast<U: Real>(&self) -> MlpNetwork<U> {
        MlpNetwork {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: l.weights.cast(),
                    biases: l.biases.iter().map(|b| U::of(b.f64())).collect(),
                })
                .collect(),
            activation_slope: U::of(self.activation_slope.f64()),
        }
    }
}
