//! Certified midpoint quadrature of `int |h|^p` over unions of boxes.
//!
//! On a box `B` of side `eps` centred at `y` the midpoint rule has error
//!
//! ```text
//! | int_B |h|^p - eps^d |h(y)|^p | <= p eps^{d+1} sqrt(d)/2 * V^{p-1} * G
//! ```
//!
//! where `V >= sup_B |h|` and `G >= sup_B |grad h|`. Summing over boxes gives
//! the estimate `I_p` and the global radius `R_p`.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{check_capability, BoxEnvelopes, BoxSpec};
use crate::error::{Error, Result};
use crate::exact_derivs::MultiIndex;
use crate::model::Network;

/// Boxes evaluated per parallel task. Fixed so the reduction order never
/// depends on the worker count.
const CHUNK: usize = 512;
/// Chunks in flight between two flushes of a streaming sink.
const CHUNKS_PER_BATCH: usize = 64;

/// Axis-aligned uniform grid of cubes of side `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    eps: f64,
    counts: Vec<usize>,
}

impl UniformGrid {
    pub fn new(lower: &[f64], upper: &[f64], eps: f64) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Shape(format!(
                "grid bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Domain(format!("grid spacing must be positive, got {eps}")));
        }
        let mut counts = Vec::with_capacity(lower.len());
        for (axis, (&lo, &hi)) in lower.iter().zip(upper).enumerate() {
            let extent = hi - lo;
            if !(extent > 0.0 && extent.is_finite()) {
                return Err(Error::Domain(format!("empty or infinite extent on axis {axis}")));
            }
            counts.push(cells_along(extent, eps).ok_or(Error::GridMismatch { axis, extent, eps })?);
        }
        Ok(Self { lower: lower.to_vec(), upper: upper.to_vec(), eps, counts })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Cells per axis.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Center of cell `index`; the last axis varies fastest.
    pub fn center(&self, mut index: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dim()];
        for axis in (0..self.dim()).rev() {
            let i = index % self.counts[axis];
            index /= self.counts[axis];
            c[axis] = self.lower[axis] + (i as f64 + 0.5) * self.eps;
        }
        c
    }

    /// Splits along the first axis after `k` cells.
    pub fn split_first_axis(&self, k: usize) -> Result<(Self, Self)> {
        if k == 0 || k >= self.counts[0] {
            return Err(Error::Input(format!("cannot split {} cells after {k}", self.counts[0])));
        }
        let cut = self.lower[0] + k as f64 * self.eps;
        let mut a = self.clone();
        let mut b = self.clone();
        a.upper[0] = cut;
        a.counts[0] = k;
        b.lower[0] = cut;
        b.counts[0] = self.counts[0] - k;
        Ok((a, b))
    }
}

/// Number of cells when `extent / eps` is an integer up to relative 1e-9.
pub(crate) fn cells_along(extent: f64, eps: f64) -> Option<usize> {
    let n = extent / eps;
    let r = n.round();
    if r >= 1.0 && (n - r).abs() <= 1e-9 * r {
        Some(r as usize)
    } else {
        None
    }
}

pub fn build_uniform_grid(lower: &[f64], upper: &[f64], eps: f64) -> Result<UniformGrid> {
    UniformGrid::new(lower, upper, eps)
}

/// An explicit list of boxes with pairwise disjoint interiors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    pub boxes: Vec<BoxSpec>,
}

impl GridDomain {
    pub fn new(boxes: Vec<BoxSpec>) -> Result<Self> {
        let Some(first) = boxes.first() else {
            return Err(Error::Input("domain has no boxes".into()));
        };
        let d = first.dim();
        if boxes.iter().any(|b| b.dim() != d) {
            return Err(Error::Shape("boxes of different dimensions".into()));
        }
        Ok(Self { boxes })
    }

    pub fn volume(&self) -> f64 {
        self.boxes.iter().map(BoxSpec::volume).sum()
    }
}

impl From<&UniformGrid> for GridDomain {
    fn from(grid: &UniformGrid) -> Self {
        Self { boxes: (0..grid.len()).map(|i| grid.cell(i)).collect() }
    }
}

/// A finite family of boxes addressed by index.
pub trait Cells: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn dim(&self) -> usize;
    fn cell(&self, index: usize) -> BoxSpec;
    /// Largest box side.
    fn max_side(&self) -> f64;
}

impl Cells for UniformGrid {
    fn len(&self) -> usize {
        self.counts.iter().product()
    }

    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn cell(&self, index: usize) -> BoxSpec {
        BoxSpec { center: self.center(index), side: self.eps }
    }

    fn max_side(&self) -> f64 {
        self.eps
    }
}

impl Cells for GridDomain {
    fn len(&self) -> usize {
        self.boxes.len()
    }

    fn dim(&self) -> usize {
        self.boxes[0].dim()
    }

    fn cell(&self, index: usize) -> BoxSpec {
        self.boxes[index].clone()
    }

    fn max_side(&self) -> f64 {
        self.boxes.iter().map(|b| b.side).fold(0.0, f64::max)
    }
}

/// What an integrand knows about itself on one box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSample {
    /// `h(y)` at the box center.
    pub value: f64,
    /// Bound on `sup_B |h|`.
    pub value_bound: f64,
    /// Bound on `sup_B |grad h|`.
    pub gradient_bound: f64,
}

/// A function with certified local value and gradient bounds.
pub trait LocalIntegrand: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, cell: &BoxSpec) -> Result<LocalSample>;
}

/// `h = d^alpha f` for a network `f`.
pub struct NetworkDerivative<'a> {
    net: &'a Network,
    alpha: MultiIndex,
}

impl<'a> NetworkDerivative<'a> {
    pub fn new(net: &'a Network, alpha: MultiIndex) -> Result<Self> {
        alpha.check_dim(net.input_dim())?;
        check_capability(net, alpha.order() + 1)?;
        Ok(Self { net, alpha })
    }
}

impl LocalIntegrand for NetworkDerivative<'_> {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }

    fn sample(&self, cell: &BoxSpec) -> Result<LocalSample> {
        let env = BoxEnvelopes::new(self.net, cell, self.alpha.order() + 1)?;
        let e = env.envelope(&self.alpha)?;
        Ok(LocalSample {
            value: e.center_value,
            value_bound: e.total,
            gradient_bound: env.gradient_bound_of(&self.alpha)?,
        })
    }
}

/// Contribution of one box: `eps^d |h(y)|^p` and its error radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalContribution {
    pub estimate: f64,
    pub error: f64,
}

pub fn local_contribution(sample: &LocalSample, cell: &BoxSpec, p: u32) -> LocalContribution {
    let d = cell.dim() as f64;
    let vol = cell.volume();
    let estimate = vol * sample.value.abs().powi(p as i32);
    let error = p as f64 * vol * cell.side * d.sqrt() / 2.0
        * sample.value_bound.powi(p as i32 - 1)
        * sample.gradient_bound;
    LocalContribution { estimate, error }
}

/// Neumaier compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `(I, R)` accumulated over a family of boxes.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadratureSums {
    pub estimate: CompensatedSum,
    pub error: CompensatedSum,
}

impl QuadratureSums {
    fn push(&mut self, c: &LocalContribution) {
        self.estimate.add(c.estimate);
        self.error.add(c.error);
    }

    fn merge(&mut self, other: &QuadratureSums) {
        self.estimate.merge(&other.estimate);
        self.error.merge(&other.error);
    }
}

fn check_p(p: u32) -> Result<()> {
    if p == 0 {
        return Err(Error::Input("p must be at least 1".into()));
    }
    Ok(())
}

/// Sums the local contributions of every box. Deterministic for any number
/// of rayon workers.
pub fn integrate<I, C>(integrand: &I, cells: &C, p: u32) -> Result<QuadratureSums>
where
    I: LocalIntegrand + ?Sized,
    C: Cells + ?Sized,
{
    integrate_streaming(integrand, cells, p, |_, _, _| {})
}

/// Like [`integrate`] but also hands every box to `sink`, in index order, in
/// bounded batches.
pub fn integrate_streaming<I, C, F>(integrand: &I, cells: &C, p: u32, mut sink: F) -> Result<QuadratureSums>
where
    I: LocalIntegrand + ?Sized,
    C: Cells + ?Sized,
    F: FnMut(&BoxSpec, &LocalSample, &LocalContribution),
{
    check_p(p)?;
    if cells.dim() != integrand.dim() {
        return Err(Error::Shape(format!(
            "grid has dimension {}, integrand expects {}",
            cells.dim(),
            integrand.dim()
        )));
    }
    let n = cells.len();
    let n_chunks = n.div_ceil(CHUNK);
    let mut total = QuadratureSums::default();
    let mut start_chunk = 0;
    while start_chunk < n_chunks {
        let end_chunk = (start_chunk + CHUNKS_PER_BATCH).min(n_chunks);
        let batch: Vec<Result<Vec<(BoxSpec, LocalSample, LocalContribution)>>> = (start_chunk..end_chunk)
            .into_par_iter()
            .map(|c| {
                let lo = c * CHUNK;
                let hi = ((c + 1) * CHUNK).min(n);
                (lo..hi)
                    .map(|i| {
                        let cell = cells.cell(i);
                        let s = integrand.sample(&cell)?;
                        let contrib = local_contribution(&s, &cell, p);
                        Ok((cell, s, contrib))
                    })
                    .collect()
            })
            .collect();
        for chunk in batch {
            let mut part = QuadratureSums::default();
            for (cell, s, contrib) in chunk? {
                if !(contrib.estimate.is_finite() && contrib.error.is_finite()) {
                    return Err(Error::Domain(format!(
                        "non-finite local quadrature term at {:?}",
                        cell.center
                    )));
                }
                part.push(&contrib);
                sink(&cell, &s, &contrib);
            }
            total.merge(&part);
        }
        start_chunk = end_chunk;
    }
    Ok(total)
}

/// Certified estimate of `|d^alpha f|_{L^p}^p` and the induced norm interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormCertificate {
    pub p: u32,
    pub alpha: MultiIndex,
    #[serde(rename = "I")]
    pub estimate: f64,
    #[serde(rename = "R")]
    pub error_bound: f64,
    pub lower: f64,
    pub upper: f64,
    pub eps: f64,
    pub n_boxes: usize,
    pub wall_time_ms: u64,
}

impl NormCertificate {
    pub fn from_sums(
        p: u32,
        alpha: MultiIndex,
        estimate: f64,
        error_bound: f64,
        eps: f64,
        n_boxes: usize,
        wall_time_ms: u64,
    ) -> Self {
        let (lower, upper) = root_interval(estimate, error_bound, p);
        Self { p, alpha, estimate, error_bound, lower, upper, eps, n_boxes, wall_time_ms }
    }

    /// `R |I - R|^{-1/2}` for `p = 2` when `I > R`, the first-order Taylor
    /// radius of `sqrt` around `I`. Reported only.
    pub fn taylor_radius(&self) -> Option<f64> {
        (self.p == 2 && self.estimate > self.error_bound)
            .then(|| self.error_bound / (self.estimate - self.error_bound).sqrt())
    }

    /// True when `value` lies in `[I - R, I + R]`.
    pub fn contains_power(&self, value: f64) -> bool {
        (self.estimate - value).abs() <= self.error_bound
    }
}

fn root_interval(estimate: f64, error: f64, p: u32) -> (f64, f64) {
    let inv = 1.0 / p as f64;
    ((estimate - error).max(0.0).powf(inv), (estimate + error).powf(inv))
}

/// `(max(I - R, 0)^{1/p}, (I + R)^{1/p})`.
pub fn norm_interval(cert: &NormCertificate) -> (f64, f64) {
    root_interval(cert.estimate, cert.error_bound, cert.p)
}

/// Certificate for an arbitrary local integrand.
pub fn certify<I, C>(integrand: &I, cells: &C, p: u32, alpha: MultiIndex) -> Result<NormCertificate>
where
    I: LocalIntegrand + ?Sized,
    C: Cells + ?Sized,
{
    certify_streaming(integrand, cells, p, alpha, |_, _, _| {})
}

pub fn certify_streaming<I, C, F>(
    integrand: &I,
    cells: &C,
    p: u32,
    alpha: MultiIndex,
    sink: F,
) -> Result<NormCertificate>
where
    I: LocalIntegrand + ?Sized,
    C: Cells + ?Sized,
    F: FnMut(&BoxSpec, &LocalSample, &LocalContribution),
{
    let start = Instant::now();
    let sums = integrate_streaming(integrand, cells, p, sink)?;
    Ok(NormCertificate::from_sums(
        p,
        alpha,
        sums.estimate.value(),
        sums.error.value(),
        cells.max_side(),
        cells.len(),
        start.elapsed().as_millis() as u64,
    ))
}

/// `I_p` and `R_p` for `|d^alpha f|^p` over `cells`.
pub fn lp_power_estimate<C: Cells + ?Sized>(
    net: &Network,
    alpha: &MultiIndex,
    cells: &C,
    p: u32,
) -> Result<NormCertificate> {
    let integrand = NetworkDerivative::new(net, alpha.clone())?;
    certify(&integrand, cells, p, alpha.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, AffineLayer};
    use ndarray::array;

    fn identity_relu() -> Network {
        let l1 = AffineLayer::new(array![[1.0]], array![0.0]).unwrap();
        let l2 = AffineLayer::new(array![[1.0]], array![0.0]).unwrap();
        Network::new(1, Activation::Relu, vec![l1, l2]).unwrap()
    }

    #[test]
    fn grid_layout() {
        let g = build_uniform_grid(&[0.0], &[1.0], 0.5).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.center(0), vec![0.25]);
        assert_eq!(g.center(1), vec![0.75]);
        let g = build_uniform_grid(&[-1.0, 0.0], &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g.counts(), &[4, 2]);
        assert_eq!(g.center(1), vec![-0.75, 0.75]);
        assert!(matches!(build_uniform_grid(&[0.0], &[1.0], 0.3), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn identity_relu_contains_one_third() {
        let net = identity_relu();
        let grid = build_uniform_grid(&[0.0], &[1.0], 0.5).unwrap();
        let cert = lp_power_estimate(&net, &MultiIndex::zero(1), &grid, 2).unwrap();
        assert!((cert.estimate - 0.3125).abs() < 1e-15);
        assert!(cert.contains_power(1.0 / 3.0), "R = {}", cert.error_bound);
    }

    #[test]
    fn zero_net_certificate_is_zero() {
        let net = Network::zeros(2, &[4, 4], Activation::Repu(3)).unwrap();
        let grid = build_uniform_grid(&[-1.0, 0.0], &[1.0, 1.0], 0.25).unwrap();
        let cert = lp_power_estimate(&net, &MultiIndex::zero(2), &grid, 2).unwrap();
        assert_eq!((cert.estimate, cert.error_bound, cert.lower, cert.upper), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn interval_arithmetic() {
        let c = NormCertificate::from_sums(2, MultiIndex::zero(1), 4.0, 0.0, 0.1, 1, 0);
        assert_eq!(norm_interval(&c), (2.0, 2.0));
        let c = NormCertificate::from_sums(2, MultiIndex::zero(1), 1.0, 1.0, 0.1, 1, 0);
        assert_eq!(c.lower, 0.0);
        assert!((c.upper - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(c.taylor_radius(), None);
        let c = NormCertificate::from_sums(2, MultiIndex::zero(1), 1.353825, 0.03246448, 0.01, 1, 0);
        assert!((c.upper - 1.177408).abs() < 5e-7, "{}", c.upper);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::default();
        for x in [1e16, 1.0, -1e16, 1.0] {
            s.add(x);
        }
        assert_eq!(s.value(), 2.0);
    }

    #[test]
    fn rejects_p_zero() {
        let net = identity_relu();
        let grid = build_uniform_grid(&[0.0], &[1.0], 0.5).unwrap();
        assert!(matches!(lp_power_estimate(&net, &MultiIndex::zero(1), &grid, 0), Err(Error::Input(_))));
    }
}
