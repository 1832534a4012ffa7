//! Certified error bounds for the heat equation
//!
//! ```text
//! u_t = kappa Lap u   in U x (0, T],   U = [-1, 1]^{d-1}
//! u   = g             at t = 0
//! u   = 0             on dU x [0, T]
//! ```
//!
//! The candidate is `v = chi f` with `chi(x) = prod_{i<d} (1 - x_i^2)`, which
//! vanishes on `dU`. Time is the last input axis of `f`. The error satisfies
//!
//! ```text
//! sup_t |u - v|_{L2(U)} <= sqrt(d) / (pi sqrt(kappa)) |phi_pde|_{L2(U_T)} + |phi_0|_{L2(U)}
//! ```
//!
//! with `phi_pde = (d_t - kappa Lap) v` and `phi_0 = v(., 0) - g`. Both norms
//! are certified with the midpoint quadrature of [`crate::quadrature`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bounds::{check_capability, BoxEnvelopes, BoxSpec};
use crate::error::{Error, Result};
use crate::exact_derivs::{gradient, MultiIndex, TwoLayerJet};
use crate::model::Network;
use crate::quadrature::{
    cells_along, certify, LocalIntegrand, LocalSample, NormCertificate, UniformGrid,
};

/// Initial data `g`, restricted to families with closed-form `G^i >= sup |d_i g|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// `A prod_i sin(m_i pi x_i)`.
    #[serde(alias = "SineProduct", alias = "sine")]
    SineProduct { amplitude: f64, frequencies: Vec<u32> },
    #[serde(alias = "ZeroIC", alias = "Zero")]
    Zero,
}

impl InitialCondition {
    pub fn sine(frequencies: Vec<u32>) -> Self {
        InitialCondition::SineProduct { amplitude: 1.0, frequencies }
    }

    fn validate(&self, space_dim: usize) -> Result<()> {
        if let InitialCondition::SineProduct { amplitude, frequencies } = self {
            if frequencies.len() != space_dim {
                return Err(Error::Input(format!(
                    "initial condition has {} frequencies, spatial dimension is {space_dim}",
                    frequencies.len()
                )));
            }
            if frequencies.contains(&0) {
                return Err(Error::Input("frequencies must be positive integers".into()));
            }
            if !amplitude.is_finite() {
                return Err(Error::Input("amplitude must be finite".into()));
            }
        }
        Ok(())
    }

    /// `g(x)` for a spatial point.
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            InitialCondition::SineProduct { amplitude, frequencies } => frequencies
                .iter()
                .zip(x)
                .fold(*amplitude, |acc, (&m, &xi)| acc * (m as f64 * PI * xi).sin()),
            InitialCondition::Zero => 0.0,
        }
    }

    /// `G^i = A m_i pi`.
    pub fn derivative_bounds(&self, space_dim: usize) -> Vec<f64> {
        match self {
            InitialCondition::SineProduct { amplitude, frequencies } => {
                frequencies.iter().map(|&m| amplitude.abs() * m as f64 * PI).collect()
            }
            InitialCondition::Zero => vec![0.0; space_dim],
        }
    }
}

/// Heat equation on `[-1, 1]^{d-1} x [0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatProblem {
    /// Space dimension plus one.
    pub d: usize,
    pub kappa: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub initial: InitialCondition,
}

impl HeatProblem {
    pub fn new(d: usize, kappa: f64, t_final: f64, initial: InitialCondition) -> Result<Self> {
        let p = Self { d, kappa, t_final, initial };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Input(format!("d must be at least 2, got {}", self.d)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Input(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::Input(format!("T must be positive, got {}", self.t_final)));
        }
        self.initial.validate(self.d - 1)
    }

    pub fn space_dim(&self) -> usize {
        self.d - 1
    }

    fn time_axis(&self) -> usize {
        self.d - 1
    }

    /// `sqrt(d) / (pi sqrt(kappa))`.
    pub fn energy_constant(&self) -> f64 {
        (self.d as f64).sqrt() / (PI * self.kappa.sqrt())
    }

    /// Uniform grid of `U x [0, T]`.
    pub fn spacetime_grid(&self, eps: f64) -> Result<UniformGrid> {
        let mut lower = vec![-1.0; self.d];
        let mut upper = vec![1.0; self.d];
        lower[self.d - 1] = 0.0;
        upper[self.d - 1] = self.t_final;
        UniformGrid::new(&lower, &upper, eps)
    }

    /// Uniform grid of `U`.
    pub fn space_grid(&self, eps: f64) -> Result<UniformGrid> {
        UniformGrid::new(&vec![-1.0; self.d - 1], &vec![1.0; self.d - 1], eps)
    }

    fn check_net(&self, net: &Network) -> Result<()> {
        if net.input_dim() != self.d {
            return Err(Error::Shape(format!(
                "network takes {} inputs, problem has d = {}",
                net.input_dim(),
                self.d
            )));
        }
        check_capability(net, 3)
    }
}

/// The face `t = 0` of a space-time grid: the cells touching it, with the time
/// axis dropped.
pub fn initial_face(grid: &UniformGrid) -> Result<UniformGrid> {
    let d = grid.dim();
    if d < 2 {
        return Err(Error::Shape("a one-dimensional grid has no spatial face".into()));
    }
    UniformGrid::new(&grid.lower()[..d - 1], &grid.upper()[..d - 1], grid.eps())
}

/// `chi(x) = prod_{i<d} (1 - x_i^2)` over the spatial coordinates of `x`
/// (the last coordinate is time and is ignored).
pub fn chi(x: &[f64]) -> f64 {
    x[..x.len() - 1].iter().map(|xi| 1.0 - xi * xi).product()
}

/// Sup norms of `chi` and its derivatives on `U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSupNorms {
    pub chi: f64,
    pub grad: f64,
    pub hessian: f64,
    pub laplacian: f64,
    pub grad_laplacian: f64,
}

pub fn chi_derivative_supnorms(d: usize) -> ChiSupNorms {
    let d = d as f64;
    ChiSupNorms { chi: 1.0, grad: 2.0, hessian: 4.0, laplacian: 2.0 * (d - 1.0), grad_laplacian: 4.0 * (d - 2.0) }
}

/// `chi`, its spatial gradient and its Laplacian at `x`.
fn chi_jet(x: &[f64]) -> (f64, Vec<f64>, f64) {
    let n = x.len() - 1;
    let factors: Vec<f64> = x[..n].iter().map(|xi| 1.0 - xi * xi).collect();
    let others = |i: usize| -> f64 {
        factors.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, f)| f).product()
    };
    let value = factors.iter().product();
    let grad = (0..n).map(|i| -2.0 * x[i] * others(i)).collect();
    let lap = (0..n).map(|i| -2.0 * others(i)).sum();
    (value, grad, lap)
}

/// Derivatives of `f` entering the residual at one point.
struct LocalJet {
    value: f64,
    grad: Vec<f64>,
    /// `d_ii f` for spatial `i`.
    space_second: Vec<f64>,
}

fn residual_pde(problem: &HeatProblem, x: &[f64], jet: &LocalJet) -> f64 {
    let t = problem.time_axis();
    let (c, c_grad, c_lap) = chi_jet(x);
    let mut lap = c_lap * jet.value;
    for i in 0..t {
        lap += 2.0 * c_grad[i] * jet.grad[i] + c * jet.space_second[i];
    }
    c * jet.grad[t] - problem.kappa * lap
}

/// `phi_pde(x) = (d_t - kappa Lap)(chi f)(x)`.
pub fn phi_pde(net: &Network, problem: &HeatProblem, x: &[f64]) -> Result<f64> {
    problem.check_net(net)?;
    let trace = net.forward(x)?;
    let g = gradient(net, &trace)?;
    let second = TwoLayerJet::new(net, &trace, 2)?;
    let space_second = (0..problem.space_dim()).map(|i| second.second(i, i)).collect::<Result<_>>()?;
    let jet = LocalJet { value: trace.output, grad: g.to_vec(), space_second };
    Ok(residual_pde(problem, x, &jet))
}

/// `phi_0(x) = chi(x, 0) f(x, 0) - g(x)` for a spatial point `x`.
pub fn phi_init(net: &Network, problem: &HeatProblem, x_space: &[f64]) -> Result<f64> {
    problem.check_net(net)?;
    if x_space.len() != problem.space_dim() {
        return Err(Error::Shape(format!(
            "spatial point has {} coordinates, expected {}",
            x_space.len(),
            problem.space_dim()
        )));
    }
    let y = lift(x_space);
    Ok(chi(&y) * net.value(&y)? - problem.initial.value(x_space))
}

fn lift(x_space: &[f64]) -> Vec<f64> {
    let mut y = x_space.to_vec();
    y.push(0.0);
    y
}

/// `Phi_pde = |(Phi^1, ..., Phi^d)|` from envelopes of order 3 on the box.
fn pde_gradient_bound_from(env: &BoxEnvelopes, problem: &HeatProblem) -> Result<f64> {
    let d = problem.d;
    let t = problem.time_axis();
    let k = problem.kappa;
    let df = d as f64;
    let e = |axes: &[usize]| env.total_axes(axes);
    let e0 = e(&[])?;
    let mut sq = 0.0;
    for j in 0..t {
        let mut inner = 0.0;
        for i in 0..t {
            inner += 4.0 * e(&[i])? + 2.0 * e(&[i, j])? + e(&[i, i])? + 0.5 * e(&[i, i, j])?;
        }
        let phi_j = 2.0 * e(&[t])?
            + e(&[j, t])?
            + k * (4.0 * (df - 2.0) * e0 + 2.0 * (df - 1.0) * e(&[j])? + 2.0 * inner);
        sq += phi_j * phi_j;
    }
    let mut inner = 0.0;
    for i in 0..t {
        inner += 4.0 * e(&[i, t])? + e(&[i, i, t])?;
    }
    let phi_t = e(&[t, t])? + k * (2.0 * (df - 1.0) * e(&[t])? + inner);
    sq += phi_t * phi_t;
    Ok(sq.sqrt())
}

fn jet_from(env: &BoxEnvelopes, problem: &HeatProblem) -> Result<LocalJet> {
    let space_second = (0..problem.space_dim())
        .map(|i| env.envelope(&MultiIndex::from_axes(problem.d, &[i, i])).map(|e| e.center_value))
        .collect::<Result<_>>()?;
    Ok(LocalJet { value: env.trace().output, grad: env.gradient().to_vec(), space_second })
}

/// Bound on `sup_B |grad phi_pde|`.
pub fn phi_pde_gradient_bound(net: &Network, problem: &HeatProblem, cell: &BoxSpec) -> Result<f64> {
    problem.check_net(net)?;
    let env = BoxEnvelopes::new(net, cell, 3)?;
    pde_gradient_bound_from(&env, problem)
}

/// Bound on `sup |grad phi_0|` over a spatial box.
pub fn phi_init_gradient_bound(net: &Network, problem: &HeatProblem, space_cell: &BoxSpec) -> Result<f64> {
    problem.check_net(net)?;
    Ok(InitResidual { net, problem }.local(space_cell)?.1)
}

/// `phi_pde` as a quadrature integrand on space-time boxes.
pub struct PdeResidual<'a> {
    pub net: &'a Network,
    pub problem: &'a HeatProblem,
}

impl LocalIntegrand for PdeResidual<'_> {
    fn dim(&self) -> usize {
        self.problem.d
    }

    fn sample(&self, cell: &BoxSpec) -> Result<LocalSample> {
        let env = BoxEnvelopes::new(self.net, cell, 3)?;
        let value = residual_pde(self.problem, &cell.center, &jet_from(&env, self.problem)?);
        let grad = pde_gradient_bound_from(&env, self.problem)?;
        Ok(LocalSample { value, value_bound: value.abs() + cell.radius() * grad, gradient_bound: grad })
    }
}

/// `phi_0` as a quadrature integrand on spatial boxes.
pub struct InitResidual<'a> {
    pub net: &'a Network,
    pub problem: &'a HeatProblem,
}

impl InitResidual<'_> {
    /// `(phi_0(y), Phi_0(y, eps))`.
    fn local(&self, space_cell: &BoxSpec) -> Result<(f64, f64)> {
        if space_cell.dim() != self.problem.space_dim() {
            return Err(Error::Shape("spatial box has the wrong dimension".into()));
        }
        let lifted = BoxSpec::new(lift(&space_cell.center), space_cell.side)?;
        let env = BoxEnvelopes::new(self.net, &lifted, 1)?;
        let e0 = env.total_axes(&[])?;
        let mut v_sq = 0.0;
        for i in 0..self.problem.space_dim() {
            let v = 2.0 * e0 + env.total_axes(&[i])?;
            v_sq += v * v;
        }
        let g_norm = self
            .problem
            .initial
            .derivative_bounds(self.problem.space_dim())
            .iter()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let value = chi(&lifted.center) * env.trace().output - self.problem.initial.value(&space_cell.center);
        Ok((value, v_sq.sqrt() + g_norm))
    }
}

impl LocalIntegrand for InitResidual<'_> {
    fn dim(&self) -> usize {
        self.problem.space_dim()
    }

    fn sample(&self, cell: &BoxSpec) -> Result<LocalSample> {
        let (value, grad) = self.local(cell)?;
        Ok(LocalSample { value, value_bound: value.abs() + cell.radius() * grad, gradient_bound: grad })
    }
}

/// Certificates for `|phi_pde|^2` and `|phi_0|^2` on grids of spacing `eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCertificates {
    pub pde: NormCertificate,
    pub init: NormCertificate,
    pub eps: f64,
}

pub fn pde_certificate(net: &Network, problem: &HeatProblem, eps: f64) -> Result<NormCertificate> {
    problem.validate()?;
    problem.check_net(net)?;
    let grid = problem.spacetime_grid(eps)?;
    certify(&PdeResidual { net, problem }, &grid, 2, MultiIndex::zero(problem.d))
}

pub fn init_certificate(net: &Network, problem: &HeatProblem, eps: f64) -> Result<NormCertificate> {
    problem.validate()?;
    problem.check_net(net)?;
    let face = initial_face(&problem.spacetime_grid(eps)?)?;
    certify(&InitResidual { net, problem }, &face, 2, MultiIndex::zero(problem.space_dim()))
}

pub fn residual_norm_certificates(net: &Network, problem: &HeatProblem, eps: f64) -> Result<ResidualCertificates> {
    Ok(ResidualCertificates {
        pde: pde_certificate(net, problem, eps)?,
        init: init_certificate(net, problem, eps)?,
        eps,
    })
}

/// `sqrt(d)/(pi sqrt(kappa)) sqrt(I_pde + R_pde) + sqrt(I_0 + R_0)`.
pub fn energy_error_bound(certs: &ResidualCertificates, problem: &HeatProblem) -> f64 {
    problem.energy_constant() * certs.pde.upper + certs.init.upper
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Certified,
    NotCertified,
    BudgetExhausted,
}

/// One pass of the refinement loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub eps: f64,
    #[serde(rename = "I_pde")]
    pub i_pde: f64,
    #[serde(rename = "R_pde")]
    pub r_pde: f64,
    #[serde(rename = "I_0")]
    pub i_0: f64,
    #[serde(rename = "R_0")]
    pub r_0: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub verdict: Verdict,
    /// Certified upper bound on `sup_t |u - v|_{L2(U)}`; the smallest one
    /// found when the budget ran out.
    pub certified_bound: f64,
    /// Grid spacing of `certificates`.
    pub eps_final: f64,
    /// Certificate evaluations performed.
    pub iterations: usize,
    pub certificates: ResidualCertificates,
    pub history: Vec<IterationRecord>,
}

/// Checks `2 / eps` and `T / eps` are integers.
pub fn check_grid_eps(problem: &HeatProblem, eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    cells_along(2.0, eps).ok_or(Error::GridMismatch { axis: 0, extent: 2.0, eps })?;
    cells_along(problem.t_final, eps).ok_or(Error::GridMismatch {
        axis: problem.time_axis(),
        extent: problem.t_final,
        eps,
    })?;
    Ok(())
}

/// Largest `eps <= eps0` with `2 / eps` and `T / eps` both integers.
pub fn default_eps_init(problem: &HeatProblem, eps0: f64) -> Result<f64> {
    if !(eps0 > 0.0 && eps0.is_finite()) {
        return Err(Error::Domain(format!("eps0 must be positive, got {eps0}")));
    }
    let first = (2.0 / eps0 - 1e-9).ceil().max(1.0) as usize;
    (first..first + 1_000_000)
        .map(|n| 2.0 / n as f64)
        .find(|&eps| cells_along(problem.t_final, eps).is_some())
        .ok_or_else(|| Error::Input(format!("no grid spacing below {eps0} divides both 2 and T")))
}

/// The refinement loop for one candidate, advanced one certificate at a time.
pub struct LocalVerifier<'a> {
    net: &'a Network,
    problem: &'a HeatProblem,
    eps0: f64,
    eps: f64,
    evaluations_left: usize,
    history: Vec<IterationRecord>,
    best: Option<(f64, ResidualCertificates)>,
    outcome: Option<VerificationOutcome>,
}

impl<'a> LocalVerifier<'a> {
    pub fn new(
        net: &'a Network,
        problem: &'a HeatProblem,
        eps0: f64,
        eps_init: f64,
        max_refinements: usize,
    ) -> Result<Self> {
        problem.validate()?;
        problem.check_net(net)?;
        if !(eps0 > 0.0 && eps0.is_finite()) {
            return Err(Error::Input(format!("eps0 must be positive, got {eps0}")));
        }
        check_grid_eps(problem, eps_init)?;
        if eps_init > eps0 {
            return Err(Error::Input(format!("eps_init = {eps_init} exceeds eps0 = {eps0}")));
        }
        Ok(Self {
            net,
            problem,
            eps0,
            eps: eps_init,
            evaluations_left: max_refinements + 1,
            history: Vec::new(),
            best: None,
            outcome: None,
        })
    }

    pub fn outcome(&self) -> Option<&VerificationOutcome> {
        self.outcome.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.outcome.is_some()
    }

    /// Computes the certificates at the current spacing, then either halts or
    /// halves the spacing.
    pub fn step(&mut self) -> Result<Option<&VerificationOutcome>> {
        if self.outcome.is_some() {
            return Ok(self.outcome.as_ref());
        }
        let certs = residual_norm_certificates(self.net, self.problem, self.eps)?;
        let bound = energy_error_bound(&certs, self.problem);
        self.history.push(IterationRecord {
            eps: self.eps,
            i_pde: certs.pde.estimate,
            r_pde: certs.pde.error_bound,
            i_0: certs.init.estimate,
            r_0: certs.init.error_bound,
            bound,
        });
        self.evaluations_left -= 1;
        if bound < self.eps0 {
            self.finish(Verdict::Certified, bound, certs);
        } else {
            if self.best.as_ref().is_none_or(|(b, _)| bound < *b) {
                self.best = Some((bound, certs));
            }
            if self.evaluations_left == 0 {
                let (bound, certs) = self.best.take().expect("at least one evaluation");
                self.finish(Verdict::BudgetExhausted, bound, certs);
            } else {
                self.eps /= 2.0;
            }
        }
        Ok(self.outcome.as_ref())
    }

    fn finish(&mut self, verdict: Verdict, bound: f64, certs: ResidualCertificates) {
        self.outcome = Some(VerificationOutcome {
            verdict,
            certified_bound: bound,
            eps_final: certs.eps,
            iterations: self.history.len(),
            certificates: certs,
            history: std::mem::take(&mut self.history),
        });
    }

    pub fn run(mut self) -> Result<VerificationOutcome> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.outcome.expect("loop ends with an outcome"))
    }
}

/// Refines until the energy bound drops below `eps0` or `max_refinements`
/// halvings of `eps_init` have been spent.
pub fn local_verify(
    net: &Network,
    problem: &HeatProblem,
    eps0: f64,
    eps_init: f64,
    max_refinements: usize,
) -> Result<VerificationOutcome> {
    LocalVerifier::new(net, problem, eps0, eps_init, max_refinements)?.run()
}

/// Runs the local loop on every candidate, one refinement level at a time in
/// index order, and returns the first candidate that certifies. When every
/// budget runs out the candidate with the smallest bound is returned.
pub fn global_verify(
    nets: &[Network],
    problem: &HeatProblem,
    eps0: f64,
    eps_init: f64,
    max_refinements: usize,
) -> Result<(usize, VerificationOutcome)> {
    if nets.is_empty() {
        return Err(Error::Input("no candidate networks".into()));
    }
    let mut verifiers = nets
        .iter()
        .map(|net| LocalVerifier::new(net, problem, eps0, eps_init, max_refinements))
        .collect::<Result<Vec<_>>>()?;
    while verifiers.iter().any(|v| !v.is_done()) {
        for (index, v) in verifiers.iter_mut().enumerate() {
            if v.is_done() {
                continue;
            }
            if let Some(out) = v.step()? {
                if out.verdict == Verdict::Certified {
                    return Ok((index, out.clone()));
                }
            }
        }
    }
    let (index, best) = verifiers
        .into_iter()
        .map(|v| v.outcome.expect("all verifiers finished"))
        .enumerate()
        .min_by(|(_, a), (_, b)| a.certified_bound.total_cmp(&b.certified_bound))
        .expect("nonempty");
    Ok((index, best))
}

/// Problem file: the equation plus the verification budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub kappa: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub d: usize,
    pub initial: InitialCondition,
    pub eps0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_init: Option<f64>,
    pub max_refinements: usize,
}

impl ProblemConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn problem(&self) -> Result<HeatProblem> {
        HeatProblem::new(self.d, self.kappa, self.t_final, self.initial.clone())
    }

    pub fn resolved_eps_init(&self) -> Result<f64> {
        match self.eps_init {
            Some(eps) => Ok(eps),
            None => default_eps_init(&self.problem()?, self.eps0),
        }
    }
}
