//! Locally uniform bounds on network derivatives over axis-aligned boxes.
//!
//! For a box `B = {x : |x - y|_inf <= eps/2}` every point satisfies
//! `|x - y| <= eps sqrt(d) / 2`. The bounds below hold for every `x` in `B`:
//!
//! * `E^k_j >= |grad z^k_j(x)|`,
//! * `Q^{k,m}_j >= |mu^(m)(z^k_j(x)) - mu^(m)(z^k_j(y))|`,
//! * `Alg(alpha) >= |d^alpha f(x) - d^alpha f(y)|`.
//!
//! First-order bounds work for any depth. Orders two and three need two hidden
//! layers and a RePU activation of sufficient order.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_derivs::{
    gradient_from_jacobians, preactivation_jacobians, require_two_layer_repu, structural_factor,
    MultiIndex, TwoLayerJet,
};
use crate::model::{factorial, falling_factorial, Activation, EvalTrace, Network};

/// Closed cube of side `side` centred at `center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: Vec<f64>,
    pub side: f64,
}

impl BoxSpec {
    pub fn new(center: Vec<f64>, side: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::Shape("box center is empty".into()));
        }
        if !(side > 0.0 && side.is_finite()) {
            return Err(Error::Domain(format!("box side must be positive and finite, got {side}")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("box center has a non-finite entry".into()));
        }
        Ok(Self { center, side })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `eps sqrt(d) / 2`, the largest distance from the center.
    pub fn radius(&self) -> f64 {
        self.side * (self.dim() as f64).sqrt() / 2.0
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(self.dim() as i32)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(&self.center).all(|(a, c)| (a - c).abs() <= self.side / 2.0)
    }

    /// Maximal change `delta = eps sqrt(d) E / 2` of a function with gradient
    /// norm at most `grad_bound` on the box.
    pub fn displacement(&self, grad_bound: f64) -> f64 {
        self.radius() * grad_bound
    }
}

/// Pre-activation gradient bounds and activation bounds of every hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationEnvelope {
    /// `E^k`, stored at index `k - 1`.
    pub grad_bounds: Vec<Array1<f64>>,
    /// `Q^{k,m}`, stored at `q[k - 1][m - 1]` for `m = 1..=max_order`.
    pub q: Vec<Vec<Array1<f64>>>,
}

impl ActivationEnvelope {
    pub fn max_order(&self) -> usize {
        self.q.first().map_or(0, Vec::len)
    }

    /// `E^k` (1-based layer).
    pub fn grad_bound(&self, k: usize) -> &Array1<f64> {
        &self.grad_bounds[k - 1]
    }

    /// `Q^{k,m}` (1-based layer and order).
    pub fn q(&self, k: usize, m: usize) -> &Array1<f64> {
        &self.q[k - 1][m - 1]
    }
}

/// Bound on `|d^alpha f|` over a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeEnvelope {
    /// `d^alpha f(y)`.
    pub center_value: f64,
    /// Bound on `|d^alpha f(x) - d^alpha f(y)|`.
    pub diff_bound: f64,
    /// `|d^alpha f(y)| + diff_bound`.
    pub total: f64,
}

impl DerivativeEnvelope {
    pub fn new(center_value: f64, diff_bound: f64) -> Self {
        Self { center_value, diff_bound, total: center_value.abs() + diff_bound }
    }
}

/// ReLU activation-status bound: 0 when the neuron cannot change sign on the
/// box (`eps sqrt(d) E < 2 |z(y)|`), 1 otherwise.
pub fn qhat_relu(z_y: f64, grad_bound: f64, cell: &BoxSpec) -> f64 {
    relu_switch(z_y, cell.displacement(grad_bound))
}

/// RePU(n) bound on the change of `mu^(i)`:
/// `sum_{m=1}^{n-i} delta^m/m! |mu^(m+i)(z_y)| + n!/(n-i)! delta^{n-i} qhat_relu`.
pub fn qhat_repu(z_y: f64, grad_bound: f64, cell: &BoxSpec, i: usize, n: u32) -> Result<f64> {
    let act = Activation::repu(n)?;
    if i == 0 {
        return Err(Error::Input("activation bounds start at derivative order 1".into()));
    }
    act.check_order(i)?;
    Ok(qhat(act, z_y, cell.displacement(grad_bound), i))
}

#[inline]
fn relu_switch(z_y: f64, delta: f64) -> f64 {
    if delta < z_y.abs() {
        0.0
    } else {
        1.0
    }
}

#[inline]
fn qhat(act: Activation, z_y: f64, delta: f64, i: usize) -> f64 {
    match act {
        Activation::Relu => relu_switch(z_y, delta),
        Activation::Repu(n) => {
            let n = n as usize;
            let mut sum = 0.0;
            let mut pow = 1.0;
            for m in 1..=(n - i) {
                pow *= delta;
                sum += pow / factorial(m) * act.derivative_unchecked(m + i, z_y).abs();
            }
            sum + falling_factorial(n, i) * delta.powi((n - i) as i32) * relu_switch(z_y, delta)
        }
    }
}

/// Checks that envelopes of order `max_order` can be built for `net`.
pub fn check_capability(net: &Network, max_order: usize) -> Result<()> {
    match max_order {
        0 => Err(Error::Input("envelope order must be at least 1".into())),
        1 => Ok(()),
        2 | 3 => require_two_layer_repu(net, max_order),
        _ => Err(Error::Capability(format!(
            "derivative bounds are implemented up to order 3, asked for {max_order}"
        ))),
    }
}

fn check_box(net: &Network, cell: &BoxSpec) -> Result<()> {
    if cell.dim() != net.input_dim() {
        return Err(Error::Shape(format!(
            "box has dimension {}, network input dimension is {}",
            cell.dim(),
            net.input_dim()
        )));
    }
    Ok(())
}

/// Activation envelope of every layer, up to derivative order `max_order`.
pub fn propagate(net: &Network, cell: &BoxSpec, max_order: usize) -> Result<ActivationEnvelope> {
    check_capability(net, max_order)?;
    check_box(net, cell)?;
    let trace = net.forward(&cell.center)?;
    let jac = preactivation_jacobians(net, &trace);
    Ok(sweep(net, &trace, &jac, cell, max_order).0)
}

/// Runs the alternating E / Q recursion. Also returns the first-order carry
/// `u^L` (shape `n_L x d`), where column `l` bounds `|d_l a^L(x) - d_l a^L(y)|`.
fn sweep(
    net: &Network,
    trace: &EvalTrace,
    jac: &[Array2<f64>],
    cell: &BoxSpec,
    max_order: usize,
) -> (ActivationEnvelope, Array2<f64>) {
    let act = net.activation();
    let depth = net.depth();
    let mut grad_bounds = Vec::with_capacity(depth);
    let mut q = Vec::with_capacity(depth);
    let mut carry: Option<Array2<f64>> = None;
    for k in 1..=depth {
        let z = &trace.preactivations[k - 1];
        let abs_jac = jac[k - 1].mapv(f64::abs);
        // |W^k| u^{k-1} bounds the change of grad z^k
        let spread = carry.as_ref().map(|u| net.abs_weight(k).dot(u));
        let e = match &spread {
            None => net.abs_weight(1).map_axis(Axis(1), |row| row.dot(&row).sqrt()),
            Some(s) => {
                let total = &abs_jac + s;
                total.map_axis(Axis(1), |row| row.dot(&row).sqrt())
            }
        };
        let qk: Vec<Array1<f64>> = (1..=max_order)
            .map(|m| {
                Zip::from(z).and(&e).map_collect(|&zj, &ej| qhat(act, zj, cell.displacement(ej), m))
            })
            .collect();
        let q1 = qk[0].view().insert_axis(Axis(1));
        let mut u = &abs_jac * &q1;
        if let Some(s) = spread {
            let slope = act.map(1, z).mapv(f64::abs) + &qk[0];
            u = u + s * &slope.insert_axis(Axis(1));
        }
        carry = Some(u);
        grad_bounds.push(e);
        q.push(qk);
    }
    (ActivationEnvelope { grad_bounds, q }, carry.expect("depth >= 1"))
}

/// The first-order carry recomputed from an existing envelope.
fn carry_from(net: &Network, jac: &[Array2<f64>], trace: &EvalTrace, env: &ActivationEnvelope) -> Array2<f64> {
    let act = net.activation();
    let mut u = &jac[0].mapv(f64::abs) * &env.q(1, 1).view().insert_axis(Axis(1));
    for k in 2..=net.depth() {
        let q1 = env.q(k, 1);
        let spread = net.abs_weight(k).dot(&u);
        let slope = act.map(1, &trace.preactivations[k - 1]).mapv(f64::abs) + q1;
        u = &jac[k - 1].mapv(f64::abs) * &q1.view().insert_axis(Axis(1))
            + spread * &slope.insert_axis(Axis(1));
    }
    u
}

fn check_env(net: &Network, env: &ActivationEnvelope, order: usize) -> Result<()> {
    if env.grad_bounds.len() != net.depth() {
        return Err(Error::Shape("activation envelope does not match the network depth".into()));
    }
    if env.max_order() < order {
        return Err(Error::Capability(format!(
            "activation envelope built to order {} but order {order} is needed",
            env.max_order()
        )));
    }
    Ok(())
}

/// First-derivative bound along axis `l`.
pub fn bound_first(
    net: &Network,
    l: usize,
    env: &ActivationEnvelope,
    trace: &EvalTrace,
    cell: &BoxSpec,
) -> Result<DerivativeEnvelope> {
    check_box(net, cell)?;
    check_env(net, env, 1)?;
    check_axis(net, l)?;
    let jac = preactivation_jacobians(net, trace);
    let grad = gradient_from_jacobians(net, trace, &jac);
    let u = carry_from(net, &jac, trace, env);
    let out = net.abs_weight(net.depth() + 1).row(0);
    Ok(DerivativeEnvelope::new(grad[l], out.dot(&u.column(l))))
}

/// Second-derivative bound along axes `(l1, l2)` for two hidden layers.
pub fn bound_second(
    net: &Network,
    l1: usize,
    l2: usize,
    env: &ActivationEnvelope,
    trace: &EvalTrace,
    cell: &BoxSpec,
) -> Result<DerivativeEnvelope> {
    let alpha = MultiIndex::from_axes(net.input_dim(), &[l1, l2]);
    HigherOrder::new(net, env, trace, cell, 2, &[l1, l2])?.envelope(&alpha)
}

/// Third-derivative bound along axes `(l1, l2, l3)` for two hidden layers.
pub fn bound_third(
    net: &Network,
    l1: usize,
    l2: usize,
    l3: usize,
    env: &ActivationEnvelope,
    trace: &EvalTrace,
    cell: &BoxSpec,
) -> Result<DerivativeEnvelope> {
    let alpha = MultiIndex::from_axes(net.input_dim(), &[l1, l2, l3]);
    HigherOrder::new(net, env, trace, cell, 3, &[l1, l2, l3])?.envelope(&alpha)
}

/// `E^(alpha)(y, eps)` for `|alpha| <= 3`.
pub fn envelope(net: &Network, alpha: &MultiIndex, cell: &BoxSpec) -> Result<DerivativeEnvelope> {
    alpha.check_dim(net.input_dim())?;
    BoxEnvelopes::new(net, cell, alpha.order().max(1))?.envelope(alpha)
}

fn check_axis(net: &Network, l: usize) -> Result<()> {
    if l >= net.input_dim() {
        return Err(Error::Shape(format!("axis {l} out of range for dimension {}", net.input_dim())));
    }
    Ok(())
}

/// Shared state of the order-2/3 bounds of a two-hidden-layer RePU network.
struct HigherOrder<'a> {
    dim: usize,
    out_abs: ndarray::ArrayView1<'a, f64>,
    jet: TwoLayerJet,
    /// `[|mu^(m)(z^2(y))|, Q^{2,m}]` for `m = 1..=order`, index `m - 1`.
    nu: Vec<[Array1<f64>; 2]>,
    /// `[|G^alpha(y)|, |W^2| (Q^{1,|alpha|} . |F(alpha)|)]`.
    g_hat: HashMap<MultiIndex, [Array1<f64>; 2]>,
}

impl<'a> HigherOrder<'a> {
    /// Builds the jet and the `G` bounds needed for `axes` (all of them when
    /// `axes` is empty).
    fn new(
        net: &'a Network,
        env: &ActivationEnvelope,
        trace: &EvalTrace,
        cell: &BoxSpec,
        order: usize,
        axes: &[usize],
    ) -> Result<Self> {
        check_capability(net, order)?;
        check_box(net, cell)?;
        check_env(net, env, order)?;
        for &l in axes {
            check_axis(net, l)?;
        }
        let dim = net.input_dim();
        let jet = TwoLayerJet::new(net, trace, order)?;
        let nu = (1..=order)
            .map(|m| [jet.mu2[m].mapv(f64::abs), env.q(2, m).clone()])
            .collect();
        let w1 = &net.layer(1).weight;
        let w2_abs = net.abs_weight(2);
        let g_hat = MultiIndex::all_up_to(dim, order)
            .into_iter()
            .map(|alpha| {
                let g0 = jet.g(&alpha).mapv(f64::abs);
                let f = structural_factor(w1, &alpha).mapv(f64::abs);
                let g1 = w2_abs.dot(&(env.q(1, alpha.order()) * &f));
                (alpha, [g0, g1])
            })
            .collect();
        Ok(Self { dim, out_abs: net.abs_weight(3).row(0), jet, nu, g_hat })
    }

    fn g(&self, axes: &[usize]) -> [&Array1<f64>; 2] {
        let [a, b] = &self.g_hat[&MultiIndex::from_axes(self.dim, axes)];
        [a, b]
    }

    fn nu(&self, m: usize) -> [&Array1<f64>; 2] {
        let [a, b] = &self.nu[m - 1];
        [a, b]
    }

    /// `|W^3| [sum_{S_3} nu^{2,2} G^a G^b + sum_{S_2} nu^{2,1} G^{ab}]`.
    fn second_diff(&self, a: usize, b: usize) -> f64 {
        let inner = mask_sum(&[self.nu(2), self.g(&[a]), self.g(&[b])])
            + mask_sum(&[self.nu(1), self.g(&[a, b])]);
        self.out_abs.dot(&inner)
    }

    fn third_diff(&self, a: usize, b: usize, c: usize) -> f64 {
        let nu2 = self.nu(2);
        let inner = mask_sum(&[self.nu(3), self.g(&[c]), self.g(&[b]), self.g(&[a])])
            + mask_sum(&[self.nu(1), self.g(&[a, b, c])])
            + mask_sum(&[nu2, self.g(&[a]), self.g(&[b, c])])
            + mask_sum(&[nu2, self.g(&[b]), self.g(&[a, c])])
            + mask_sum(&[nu2, self.g(&[c]), self.g(&[a, b])]);
        self.out_abs.dot(&inner)
    }

    fn envelope(&self, alpha: &MultiIndex) -> Result<DerivativeEnvelope> {
        let axes = alpha.axes();
        let diff = match axes.as_slice() {
            &[a, b] => self.second_diff(a, b),
            &[a, b, c] => self.third_diff(a, b, c),
            _ => unreachable!("higher-order bounds are only asked for orders 2 and 3"),
        };
        Ok(DerivativeEnvelope::new(self.jet.partial(alpha)?, diff))
    }
}

/// `sum over masks s != 0 of prod_i slots[i][s_i]`, element-wise.
fn mask_sum(slots: &[[&Array1<f64>; 2]]) -> Array1<f64> {
    let k = slots.len();
    let mut acc = Array1::zeros(slots[0][0].len());
    for mask in 1usize..(1 << k) {
        let mut term = slots[0][mask & 1].clone();
        for (i, slot) in slots.iter().enumerate().skip(1) {
            term *= slot[(mask >> i) & 1];
        }
        acc += &term;
    }
    acc
}

/// Every envelope of order `<= max_order` on one box, sharing the forward
/// pass, the activation envelope and the jet.
pub struct BoxEnvelopes<'a> {
    cell: BoxSpec,
    order: usize,
    trace: EvalTrace,
    activation: ActivationEnvelope,
    gradient: Array1<f64>,
    first_diff: Array1<f64>,
    higher: Option<HigherOrder<'a>>,
}

impl<'a> BoxEnvelopes<'a> {
    pub fn new(net: &'a Network, cell: &BoxSpec, max_order: usize) -> Result<Self> {
        check_capability(net, max_order)?;
        check_box(net, cell)?;
        let trace = net.forward(&cell.center)?;
        let jac = preactivation_jacobians(net, &trace);
        let (activation, carry) = sweep(net, &trace, &jac, cell, max_order);
        let gradient = gradient_from_jacobians(net, &trace, &jac);
        let first_diff = net.abs_weight(net.depth() + 1).row(0).dot(&carry);
        let higher = if max_order >= 2 {
            Some(HigherOrder::new(net, &activation, &trace, cell, max_order, &[])?)
        } else {
            None
        };
        Ok(Self { cell: cell.clone(), order: max_order, trace, activation, gradient, first_diff, higher })
    }

    pub fn cell(&self) -> &BoxSpec {
        &self.cell
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn trace(&self) -> &EvalTrace {
        &self.trace
    }

    pub fn activation_envelope(&self) -> &ActivationEnvelope {
        &self.activation
    }

    /// `grad f(y)`.
    pub fn gradient(&self) -> &Array1<f64> {
        &self.gradient
    }

    /// `E(y, eps) = |(E^(e_1), ..., E^(e_d))|`.
    pub fn gradient_norm_bound(&self) -> f64 {
        self.gradient
            .iter()
            .zip(&self.first_diff)
            .map(|(g, u)| {
                let t = g.abs() + u;
                t * t
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn envelope(&self, alpha: &MultiIndex) -> Result<DerivativeEnvelope> {
        alpha.check_dim(self.cell.dim())?;
        let order = alpha.order();
        if order > self.order {
            return Err(Error::Capability(format!(
                "envelopes on this box were built to order {}, asked for {order}",
                self.order
            )));
        }
        match order {
            0 => Ok(DerivativeEnvelope::new(
                self.trace.output,
                self.cell.radius() * self.gradient_norm_bound(),
            )),
            1 => {
                let l = alpha.axes()[0];
                Ok(DerivativeEnvelope::new(self.gradient[l], self.first_diff[l]))
            }
            _ => self.higher.as_ref().expect("order >= 2 builds the jet").envelope(alpha),
        }
    }

    /// `E^(alpha)(y, eps)`.
    pub fn total(&self, alpha: &MultiIndex) -> Result<f64> {
        Ok(self.envelope(alpha)?.total)
    }

    /// Shorthand for `total` with the multi-index given as axes.
    pub fn total_axes(&self, axes: &[usize]) -> Result<f64> {
        self.total(&MultiIndex::from_axes(self.cell.dim(), axes))
    }

    /// `|(E^(alpha + e_1), ..., E^(alpha + e_d))|`, a bound on `|grad d^alpha f|`.
    pub fn gradient_bound_of(&self, alpha: &MultiIndex) -> Result<f64> {
        let mut sq = 0.0;
        for l in 0..self.cell.dim() {
            let t = self.total(&alpha.plus_unit(l))?;
            sq += t * t;
        }
        Ok(sq.sqrt())
    }
}
