//! Exact partial derivatives of a network at a point.
//!
//! First derivatives are available for any depth. Higher derivatives are
//! available for one hidden layer (any order the activation supports) and for
//! two hidden layers up to order three.

use std::collections::HashMap;
use std::fmt;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, EvalTrace, Network};

/// Exponents `(alpha_1, ..., alpha_d)` of a mixed partial derivative.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(exponents: Vec<u32>) -> Self {
        Self(exponents)
    }

    pub fn zero(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    /// `e_l` (0-based axis).
    pub fn unit(dim: usize, axis: usize) -> Self {
        let mut e = vec![0; dim];
        e[axis] += 1;
        Self(e)
    }

    /// `e_{l_1} + ... + e_{l_k}`.
    pub fn from_axes(dim: usize, axes: &[usize]) -> Self {
        let mut e = vec![0; dim];
        for &a in axes {
            e[a] += 1;
        }
        Self(e)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn order(&self) -> usize {
        self.0.iter().map(|&a| a as usize).sum()
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    /// Axes with multiplicity, ascending: `(1, 2, 0)` gives `[0, 1, 1]`.
    pub fn axes(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(k, &a)| std::iter::repeat_n(k, a as usize))
            .collect()
    }

    pub fn plus_unit(&self, axis: usize) -> Self {
        let mut e = self.0.clone();
        e[axis] += 1;
        Self(e)
    }

    /// Every multi-index of dimension `dim` with `1 <= |alpha| <= max_order`.
    pub fn all_up_to(dim: usize, max_order: usize) -> Vec<MultiIndex> {
        let mut out = Vec::new();
        for order in 1..=max_order {
            let mut axes = vec![0usize; order];
            loop {
                out.push(Self::from_axes(dim, &axes));
                // next non-decreasing sequence
                let Some(pos) = (0..order).rev().find(|&i| axes[i] + 1 < dim) else {
                    break;
                };
                let next = axes[pos] + 1;
                axes[pos..].iter_mut().for_each(|a| *a = next);
            }
        }
        out
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::Shape(format!(
                "multi-index has {} entries, network input dimension is {}",
                self.dim(),
                dim
            )));
        }
        Ok(())
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// `F(alpha) = prod_k (W^1 e_k)^{alpha_k}`, element-wise.
pub fn structural_factor(w1: &Array2<f64>, alpha: &MultiIndex) -> Array1<f64> {
    let mut f = Array1::ones(w1.nrows());
    for axis in alpha.axes() {
        f *= &w1.column(axis);
    }
    f
}

/// Jacobians `dz^k/dx` (shape `n_k x d`) of every hidden pre-activation at the
/// traced point.
pub fn preactivation_jacobians(net: &Network, trace: &EvalTrace) -> Vec<Array2<f64>> {
    let act = net.activation();
    let mut out: Vec<Array2<f64>> = Vec::with_capacity(net.depth());
    out.push(net.layer(1).weight.clone());
    for k in 2..=net.depth() {
        let slope = act.map(1, &trace.preactivations[k - 2]);
        let scaled = &out[k - 2] * &slope.insert_axis(Axis(1));
        out.push(net.layer(k).weight.dot(&scaled));
    }
    out
}

/// `(d_1 f(y), ..., d_d f(y))` through the layered Hadamard-product formula.
pub fn gradient(net: &Network, trace: &EvalTrace) -> Result<Array1<f64>> {
    check_trace(net, trace)?;
    let jac = preactivation_jacobians(net, trace);
    Ok(gradient_from_jacobians(net, trace, &jac))
}

pub(crate) fn gradient_from_jacobians(
    net: &Network,
    trace: &EvalTrace,
    jac: &[Array2<f64>],
) -> Array1<f64> {
    let depth = net.depth();
    let slope = net.activation().map(1, &trace.preactivations[depth - 1]);
    let weighted = &net.output_weights() * &slope;
    weighted.dot(&jac[depth - 1])
}

/// `d^alpha f(y)` for a single hidden layer: `W^2 (mu^(|alpha|)(z^1) . F(alpha))`.
/// For `alpha = 0` this is the network output, bias included.
pub fn partial_alpha_one_layer(net: &Network, alpha: &MultiIndex, trace: &EvalTrace) -> Result<f64> {
    if net.depth() != 1 {
        return Err(Error::Capability(format!(
            "one-layer formula applied to a network with {} hidden layers",
            net.depth()
        )));
    }
    check_trace(net, trace)?;
    alpha.check_dim(net.input_dim())?;
    let order = alpha.order();
    if order == 0 {
        return Ok(trace.output);
    }
    net.activation().check_order(order)?;
    let mu = net.activation().map(order, &trace.preactivations[0]);
    let f = structural_factor(&net.layer(1).weight, alpha);
    Ok(net.output_weights().dot(&(mu * f)))
}

/// `d_{l1} d_{l2} f(y)` for a two-hidden-layer network.
pub fn second_partial_two_layer(net: &Network, l1: usize, l2: usize, trace: &EvalTrace) -> Result<f64> {
    let jet = TwoLayerJet::new(net, trace, 2)?;
    jet.second(l1, l2)
}

/// `d_{l1} d_{l2} d_{l3} f(y)` for a two-hidden-layer network.
pub fn third_partial_two_layer(
    net: &Network,
    l1: usize,
    l2: usize,
    l3: usize,
    trace: &EvalTrace,
) -> Result<f64> {
    let jet = TwoLayerJet::new(net, trace, 3)?;
    jet.third(l1, l2, l3)
}

/// `d^alpha f(y)` by whichever exact formula covers the network and order.
pub fn partial(net: &Network, alpha: &MultiIndex, trace: &EvalTrace) -> Result<f64> {
    alpha.check_dim(net.input_dim())?;
    match alpha.order() {
        0 => Ok(trace.output),
        1 => {
            let axis = alpha.axes()[0];
            Ok(gradient(net, trace)?[axis])
        }
        order => match net.depth() {
            1 => partial_alpha_one_layer(net, alpha, trace),
            2 => TwoLayerJet::new(net, trace, order)?.partial(alpha),
            depth => Err(Error::Capability(format!(
                "derivatives of order {order} need at most two hidden layers, network has {depth}"
            ))),
        },
    }
}

/// Activation derivatives and the `G^alpha = W^2 (mu^(|alpha|)(z^1) . F(alpha))`
/// vectors of a two-hidden-layer network at one point.
///
/// `G^alpha` equals `d^alpha z^2(y)`; the vectors are computed once and shared by
/// every derivative evaluated at the point.
#[derive(Debug, Clone)]
pub struct TwoLayerJet {
    dim: usize,
    order: usize,
    output: f64,
    out_weights: Array1<f64>,
    /// `mu^(m)(z^1(y))` for `m = 0..=order`.
    pub mu1: Vec<Array1<f64>>,
    /// `mu^(m)(z^2(y))` for `m = 0..=order`.
    pub mu2: Vec<Array1<f64>>,
    g: HashMap<MultiIndex, Array1<f64>>,
}

impl TwoLayerJet {
    pub fn new(net: &Network, trace: &EvalTrace, order: usize) -> Result<Self> {
        if net.depth() != 2 {
            return Err(Error::Capability(format!(
                "two-layer derivative formulas applied to a network with {} hidden layers",
                net.depth()
            )));
        }
        if order > 3 {
            return Err(Error::Capability(format!(
                "exact two-layer derivatives are implemented up to order 3, asked for {order}"
            )));
        }
        check_trace(net, trace)?;
        let act = net.activation();
        act.check_order(order)?;
        let dim = net.input_dim();
        let mu1: Vec<_> = (0..=order).map(|m| act.map(m, &trace.preactivations[0])).collect();
        let mu2: Vec<_> = (0..=order).map(|m| act.map(m, &trace.preactivations[1])).collect();
        let w1 = &net.layer(1).weight;
        let w2 = &net.layer(2).weight;
        let g = MultiIndex::all_up_to(dim, order)
            .into_iter()
            .map(|alpha| {
                let v = w2.dot(&(&mu1[alpha.order()] * &structural_factor(w1, &alpha)));
                (alpha, v)
            })
            .collect();
        Ok(Self {
            dim,
            order,
            output: trace.output,
            out_weights: net.output_weights().to_owned(),
            mu1,
            mu2,
            g,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// `G^alpha` for `1 <= |alpha| <= order`.
    pub fn g(&self, alpha: &MultiIndex) -> &Array1<f64> {
        &self.g[alpha]
    }

    fn g_axes(&self, axes: &[usize]) -> &Array1<f64> {
        self.g(&MultiIndex::from_axes(self.dim, axes))
    }

    fn check_axes(&self, axes: &[usize]) -> Result<()> {
        if axes.len() > self.order {
            return Err(Error::Capability(format!(
                "jet built to order {} cannot evaluate order {}",
                self.order,
                axes.len()
            )));
        }
        if let Some(&bad) = axes.iter().find(|&&a| a >= self.dim) {
            return Err(Error::Shape(format!("axis {bad} out of range for dimension {}", self.dim)));
        }
        Ok(())
    }

    pub fn value(&self) -> f64 {
        self.output
    }

    pub fn first(&self, l: usize) -> Result<f64> {
        self.check_axes(&[l])?;
        Ok(self.out_weights.dot(&(&self.mu2[1] * self.g_axes(&[l]))))
    }

    /// `W^3 [mu''(z^2) . G^(l1) . G^(l2) + mu'(z^2) . G^(l1,l2)]`.
    pub fn second(&self, l1: usize, l2: usize) -> Result<f64> {
        self.check_axes(&[l1, l2])?;
        let (a, b) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let (ga, gb) = (self.g_axes(&[a]), self.g_axes(&[b]));
        let inner = &self.mu2[2] * ga * gb + &self.mu2[1] * self.g_axes(&[a, b]);
        Ok(self.out_weights.dot(&inner))
    }

    /// Five-term third-derivative formula. Axes are sorted first so every
    /// permutation gives a bit-identical result.
    pub fn third(&self, l1: usize, l2: usize, l3: usize) -> Result<f64> {
        self.check_axes(&[l1, l2, l3])?;
        let mut ax = [l1, l2, l3];
        ax.sort_unstable();
        let [a, b, c] = ax;
        let (ga, gb, gc) = (self.g_axes(&[a]), self.g_axes(&[b]), self.g_axes(&[c]));
        let mixed = ga * self.g_axes(&[b, c]) + gb * self.g_axes(&[a, c]) + gc * self.g_axes(&[a, b]);
        let inner = &self.mu2[3] * gc * gb * ga
            + &self.mu2[1] * self.g_axes(&[a, b, c])
            + &self.mu2[2] * &mixed;
        Ok(self.out_weights.dot(&inner))
    }

    pub fn partial(&self, alpha: &MultiIndex) -> Result<f64> {
        alpha.check_dim(self.dim)?;
        let axes = alpha.axes();
        match axes.as_slice() {
            [] => Ok(self.output),
            &[l] => self.first(l),
            &[l1, l2] => self.second(l1, l2),
            &[l1, l2, l3] => self.third(l1, l2, l3),
            _ => Err(Error::Capability(format!(
                "order {} exceeds the two-layer formulas",
                axes.len()
            ))),
        }
    }
}

fn check_trace(net: &Network, trace: &EvalTrace) -> Result<()> {
    if trace.point.len() != net.input_dim() || trace.preactivations.len() != net.depth() {
        return Err(Error::Shape("trace was not produced by this network".into()));
    }
    Ok(())
}

/// Guard used by callers that need smooth derivatives of order `order`.
pub(crate) fn require_two_layer_repu(net: &Network, order: usize) -> Result<()> {
    if net.depth() != 2 {
        return Err(Error::Capability(format!(
            "order-{order} derivatives need exactly two hidden layers, network has {}",
            net.depth()
        )));
    }
    match net.activation() {
        Activation::Repu(n) if n as usize >= order => Ok(()),
        act => Err(Error::UnsupportedOrder { order, activation: act.to_string() }),
    }
}
