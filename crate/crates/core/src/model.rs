//! Multilayer perceptrons with ReLU / RePU activations.
//!
//! A network `f: R^d -> R` with `L` hidden layers is stored as `L + 1` affine
//! maps. Hidden layer `k` computes `z^k = W^k a^{k-1} + b^k`, `a^k = mu(z^k)`
//! with `a^0 = x`; the output is `W^{L+1} a^L + b^{L+1}`.

use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shared activation of all hidden neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `max(0, t)`, once weakly differentiable.
    Relu,
    /// `max(0, t)^n` with `n >= 2`, `n` times weakly differentiable.
    Repu(u32),
}

impl Activation {
    pub fn repu(order: u32) -> Result<Self> {
        if order < 2 {
            return Err(Error::Input(format!("RePU order must be >= 2, got {order}")));
        }
        Ok(Activation::Repu(order))
    }

    /// Highest supported (weak) derivative order.
    pub fn max_order(self) -> usize {
        match self {
            Activation::Relu => 1,
            Activation::Repu(n) => n as usize,
        }
    }

    pub fn check_order(self, m: usize) -> Result<()> {
        if m > self.max_order() {
            return Err(Error::UnsupportedOrder { order: m, activation: self.to_string() });
        }
        Ok(())
    }

    /// `mu^(m)(t)`. At the kink `t = 0` every derivative of order `m >= 1` is 0.
    pub fn derivative(self, m: usize, t: f64) -> Result<f64> {
        self.check_order(m)?;
        Ok(self.derivative_unchecked(m, t))
    }

    #[inline]
    pub(crate) fn derivative_unchecked(self, m: usize, t: f64) -> f64 {
        match self {
            Activation::Relu => match m {
                0 => t.max(0.0),
                _ => {
                    if t > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            },
            Activation::Repu(n) => {
                if t > 0.0 {
                    let n = n as usize;
                    falling_factorial(n, m) * t.powi((n - m) as i32)
                } else {
                    0.0
                }
            }
        }
    }

    /// Element-wise `mu^(m)` of a vector; `m` must already be validated.
    pub(crate) fn map(self, m: usize, z: &Array1<f64>) -> Array1<f64> {
        z.mapv(|t| self.derivative_unchecked(m, t))
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "ReLU"),
            Activation::Repu(n) => write!(f, "RePU({n})"),
        }
    }
}

/// `n! / (n - m)!`, i.e. `n (n-1) ... (n-m+1)`.
pub fn falling_factorial(n: usize, m: usize) -> f64 {
    debug_assert!(m <= n);
    ((n - m + 1)..=n).fold(1.0, |acc, k| acc * k as f64)
}

pub fn factorial(n: usize) -> f64 {
    falling_factorial(n, n)
}

/// One affine map `x -> W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AffineLayer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::Shape(format!(
                "weight has {} rows but bias has length {}",
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }
}

/// Parameters of an MLP `f` with `L >= 1` hidden layers and scalar output.
///
/// Immutable once built; every shape and entry has been validated.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    activation: Activation,
    layers: Vec<AffineLayer>,
    abs_weights: Vec<Array2<f64>>,
}

impl Network {
    pub fn new(input_dim: usize, activation: Activation, layers: Vec<AffineLayer>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Shape("input dimension must be positive".into()));
        }
        if layers.len() < 2 {
            return Err(Error::Shape(format!(
                "a network needs at least one hidden layer (got {} affine maps)",
                layers.len()
            )));
        }
        if let Activation::Repu(n) = activation {
            if n < 2 {
                return Err(Error::Input(format!("RePU order must be >= 2, got {n}")));
            }
        }
        let mut fan_in = input_dim;
        for (k, layer) in layers.iter().enumerate() {
            if layer.in_dim() != fan_in {
                return Err(Error::Shape(format!(
                    "layer {} expects {} inputs but the previous layer has width {}",
                    k + 1,
                    layer.in_dim(),
                    fan_in
                )));
            }
            if layer.out_dim() == 0 {
                return Err(Error::Shape(format!("layer {} has zero width", k + 1)));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("layer {} has a non-finite entry", k + 1)));
            }
            fan_in = layer.out_dim();
        }
        if fan_in != 1 {
            return Err(Error::Shape(format!("output layer must have width 1, got {fan_in}")));
        }
        let abs_weights = layers.iter().map(|l| l.weight.mapv(f64::abs)).collect();
        Ok(Self { input_dim, activation, layers, abs_weights })
    }

    /// A network whose weights and biases are all zero.
    pub fn zeros(input_dim: usize, hidden_widths: &[usize], activation: Activation) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden_widths.len() + 1);
        let mut fan_in = input_dim;
        for &w in hidden_widths.iter().chain(std::iter::once(&1)) {
            layers.push(AffineLayer::new(Array2::zeros((w, fan_in)), Array1::zeros(w))?);
            fan_in = w;
        }
        Self::new(input_dim, activation, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.depth()].iter().map(AffineLayer::out_dim).collect()
    }

    /// All `L + 1` affine maps, input to output.
    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    /// Affine map `k` using 1-based numbering (`W^k`, `b^k`), `1 <= k <= L + 1`.
    pub fn layer(&self, k: usize) -> &AffineLayer {
        &self.layers[k - 1]
    }

    /// Entry-wise `|W^k|`, 1-based like [`Network::layer`].
    pub fn abs_weight(&self, k: usize) -> &Array2<f64> {
        &self.abs_weights[k - 1]
    }

    /// Output weights `W^{L+1}` as a vector.
    pub fn output_weights(&self) -> ArrayView1<'_, f64> {
        self.layers[self.depth()].weight.row(0)
    }

    pub fn output_bias(&self) -> f64 {
        self.layers[self.depth()].bias[0]
    }

    pub fn forward(&self, x: &[f64]) -> Result<EvalTrace> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "point has {} coordinates, network expects {}",
                x.len(),
                self.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("point has a non-finite coordinate".into()));
        }
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> EvalTrace {
        let point = Array1::from(x.to_vec());
        let depth = self.depth();
        let mut preactivations = Vec::with_capacity(depth);
        let mut activations: Vec<Array1<f64>> = Vec::with_capacity(depth);
        for layer in &self.layers[..depth] {
            let z = layer.apply(activations.last().unwrap_or(&point));
            activations.push(self.activation.map(0, &z));
            preactivations.push(z);
        }
        let output = self.layers[depth].apply(&activations[depth - 1])[0];
        EvalTrace { point, preactivations, activations, output }
    }

    /// Just `f(x)`, skipping the trace bookkeeping.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        self.forward(x).map(|t| t.output)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: WeightFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&WeightFile::from(self)).expect("weight file serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }
}

/// Pre-activations, activations and output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTrace {
    pub point: Array1<f64>,
    /// `z^1(y), ..., z^L(y)`.
    pub preactivations: Vec<Array1<f64>>,
    /// `a^1(y), ..., a^L(y)`.
    pub activations: Vec<Array1<f64>>,
    pub output: f64,
}

// On-disk weight format, shared with the training tooling.

#[derive(Debug, Serialize, Deserialize)]
struct WeightFile {
    input_dim: usize,
    activation: ActivationRecord,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ActivationRecord {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    order: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl TryFrom<WeightFile> for Network {
    type Error = Error;

    fn try_from(file: WeightFile) -> Result<Self> {
        let activation = match (file.activation.kind.to_ascii_lowercase().as_str(), file.activation.order) {
            ("relu", None) => Activation::Relu,
            ("relu", Some(o)) => {
                return Err(Error::Input(format!("ReLU takes no order, got {o}")));
            }
            ("repu", Some(n)) => Activation::repu(n)?,
            ("repu", None) => return Err(Error::Input("RePU activation needs an order".into())),
            (other, _) => return Err(Error::Input(format!("unknown activation kind {other:?}"))),
        };
        let layers = file
            .layers
            .into_iter()
            .enumerate()
            .map(|(k, rec)| {
                let rows = rec.weight.len();
                let cols = rec.weight.first().map_or(0, Vec::len);
                if rec.weight.iter().any(|r| r.len() != cols) {
                    return Err(Error::Shape(format!("layer {} has ragged weight rows", k + 1)));
                }
                let flat: Vec<f64> = rec.weight.into_iter().flatten().collect();
                let weight = Array2::from_shape_vec((rows, cols), flat)
                    .map_err(|e| Error::Shape(e.to_string()))?;
                AffineLayer::new(weight, Array1::from(rec.bias))
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(file.input_dim, activation, layers)
    }
}

impl From<&Network> for WeightFile {
    fn from(net: &Network) -> Self {
        let activation = match net.activation {
            Activation::Relu => ActivationRecord { kind: "relu".into(), order: None },
            Activation::Repu(n) => ActivationRecord { kind: "repu".into(), order: Some(n) },
        };
        let layers = net
            .layers
            .iter()
            .map(|l| LayerRecord {
                weight: l.weight.outer_iter().map(|r| r.to_vec()).collect(),
                bias: l.bias.to_vec(),
            })
            .collect();
        WeightFile { input_dim: net.input_dim, activation, layers }
    }
}
