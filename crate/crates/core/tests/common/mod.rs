#![allow(dead_code)]

use std::path::PathBuf;

use certiquad_core::{Activation, AffineLayer, BoxSpec, Network};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn load_fixture(name: &str) -> Network {
    Network::from_path(fixture(name)).expect("fixture loads")
}

/// Gaussian weights scaled by `1/sqrt(fan_in)`, uniform biases in `[-0.5, 0.5]`.
pub fn random_net(rng: &mut ChaCha8Rng, d: usize, widths: &[usize], activation: Activation) -> Network {
    let mut dims = vec![d];
    dims.extend_from_slice(widths);
    dims.push(1);
    let layers = dims
        .windows(2)
        .map(|w| {
            let scale = 1.0 / (w[0] as f64).sqrt();
            let weight = Array2::from_shape_fn((w[1], w[0]), |_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            });
            let bias = Array1::from_shape_fn(w[1], |_| rng.random_range(-0.5..0.5));
            AffineLayer::new(weight, bias).unwrap()
        })
        .collect();
    Network::new(d, activation, layers).unwrap()
}

/// Two hidden layers, RePU(3), widths in `1..=16`, input dimension in `1..=3`.
pub fn random_repu3(rng: &mut ChaCha8Rng) -> Network {
    let d = rng.random_range(1..=3);
    let w1 = rng.random_range(1..=16);
    let w2 = rng.random_range(1..=16);
    random_net(rng, d, &[w1, w2], Activation::Repu(3))
}

pub fn random_point(rng: &mut ChaCha8Rng, d: usize, half_width: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-half_width..half_width)).collect()
}

/// Uniform samples in the box, the first `2^d` of them being its corners.
pub fn box_samples(rng: &mut ChaCha8Rng, cell: &BoxSpec, n: usize) -> Vec<Vec<f64>> {
    let d = cell.dim();
    let h = cell.side / 2.0;
    let mut out: Vec<Vec<f64>> = (0..1usize << d)
        .map(|mask| (0..d).map(|i| cell.center[i] + if mask >> i & 1 == 1 { h } else { -h }).collect())
        .collect();
    while out.len() < n {
        out.push((0..d).map(|i| cell.center[i] + rng.random_range(-h..=h)).collect());
    }
    out.truncate(n);
    out
}

/// True when every pre-activation keeps its sign and stays at least `gap`
/// away from zero at all `points`.
pub fn same_pattern(net: &Network, points: &[Vec<f64>], gap: f64) -> bool {
    let base = net.forward(&points[0]).unwrap();
    points.iter().all(|x| {
        let t = net.forward(x).unwrap();
        t.preactivations.iter().zip(&base.preactivations).all(|(z, z0)| {
            z.iter().zip(z0.iter()).all(|(a, b)| a.abs() >= gap && (a > &0.0) == (b > &0.0))
        })
    })
}

pub fn shifted(x: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut y = x.to_vec();
    for &(i, h) in moves {
        y[i] += h;
    }
    y
}

pub fn fd_first(f: &dyn Fn(&[f64]) -> f64, x: &[f64], l: usize, h: f64) -> f64 {
    (f(&shifted(x, &[(l, h)])) - f(&shifted(x, &[(l, -h)]))) / (2.0 * h)
}

pub fn fd_second(f: &dyn Fn(&[f64]) -> f64, x: &[f64], l1: usize, l2: usize, h: f64) -> f64 {
    if l1 == l2 {
        return (f(&shifted(x, &[(l1, h)])) - 2.0 * f(x) + f(&shifted(x, &[(l1, -h)]))) / (h * h);
    }
    (f(&shifted(x, &[(l1, h), (l2, h)])) - f(&shifted(x, &[(l1, h), (l2, -h)]))
        - f(&shifted(x, &[(l1, -h), (l2, h)]))
        + f(&shifted(x, &[(l1, -h), (l2, -h)])))
        / (4.0 * h * h)
}

/// Central difference of the second difference along `l3`, Richardson
/// extrapolated from steps `h` and `h/2`.
pub fn fd_third(f: &dyn Fn(&[f64]) -> f64, x: &[f64], l1: usize, l2: usize, l3: usize, h: f64) -> f64 {
    let d3 = |h: f64| {
        (fd_second(f, &shifted(x, &[(l3, h)]), l1, l2, h) - fd_second(f, &shifted(x, &[(l3, -h)]), l1, l2, h))
            / (2.0 * h)
    };
    (4.0 * d3(h / 2.0) - d3(h)) / 3.0
}

/// All points a third-order stencil of step `h` touches, up to the corners.
pub fn stencil(x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let d = x.len();
    let mut pts = vec![x.to_vec()];
    for mask in 0..3usize.pow(d as u32) {
        let mut m = mask;
        let mut y = x.to_vec();
        for yi in y.iter_mut() {
            *yi += (m % 3) as f64 * 2.0 * h - 2.0 * h;
            m /= 3;
        }
        pts.push(y);
    }
    pts
}

pub fn rel_err(exact: f64, approx: f64, scale: f64) -> f64 {
    (exact - approx).abs() / exact.abs().max(scale)
}

/// Worst relative errors of exact first, second and third partials against
/// finite differences at `x` (steps 1e-5, 1e-4, 5e-3). Errors are relative
/// to `max(|exact|, 0.1 * largest partial of that order)`.
pub fn fd_worst(net: &Network, x: &[f64]) -> [f64; 3] {
    use certiquad_core::exact_derivs::partial;
    use certiquad_core::MultiIndex;
    let d = net.input_dim();
    let f = |p: &[f64]| net.value(p).unwrap();
    let trace = net.forward(x).unwrap();
    let mut worst = [0.0f64; 3];
    for order in 1..=3 {
        let mut cases = Vec::new();
        for alpha in MultiIndex::all_up_to(d, order).into_iter().filter(|a| a.order() == order) {
            let axes = alpha.axes();
            let exact = partial(net, &alpha, &trace).unwrap();
            let approx = match order {
                1 => fd_first(&f, x, axes[0], 1e-5),
                2 => fd_second(&f, x, axes[0], axes[1], 1e-4),
                _ => fd_third(&f, x, axes[0], axes[1], axes[2], 5e-3),
            };
            cases.push((exact, approx));
        }
        let scale = 0.1 * cases.iter().map(|c| c.0.abs()).fold(0.0, f64::max);
        for (exact, approx) in cases {
            if scale == 0.0 && approx.abs() < 1e-9 {
                continue;
            }
            worst[order - 1] = worst[order - 1].max(rel_err(exact, approx, scale));
        }
    }
    worst
}

/// A point in `[-1, 1]^d` whose third-order stencil stays off every kink.
pub fn smooth_point(net: &Network, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let x = random_point(rng, net.input_dim(), 1.0);
        if same_pattern(net, &stencil(&x, 5e-3), 1e-3) {
            return x;
        }
    }
}

/// Outcome of a dense-sampling sweep over one or more boxes.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sweep {
    pub checks: usize,
    pub violations: usize,
}

impl Sweep {
    pub fn add(&mut self, other: Sweep) {
        self.checks += other.checks;
        self.violations += other.violations;
    }
}

fn within(value: f64, bound: f64, reference: f64) -> bool {
    value <= bound + 1e-10 * (1.0 + reference.abs())
}

/// Checks `|d^alpha f(x) - d^alpha f(y)| <= diff_bound` and
/// `|d^alpha f(x)| <= total` for every `|alpha| <= max_order` at `n` samples.
pub fn derivative_sweep(net: &Network, cell: &BoxSpec, rng: &mut ChaCha8Rng, n: usize, max_order: usize) -> Sweep {
    use certiquad_core::exact_derivs::{gradient, TwoLayerJet};
    use certiquad_core::{BoxEnvelopes, MultiIndex};
    let d = net.input_dim();
    let env = BoxEnvelopes::new(net, cell, max_order).unwrap();
    let alphas = MultiIndex::all_up_to(d, max_order);
    let envs: Vec<_> = alphas.iter().map(|a| env.envelope(a).unwrap()).collect();
    let mut sweep = Sweep::default();
    for x in box_samples(rng, cell, n) {
        let trace = net.forward(&x).unwrap();
        let values: Vec<f64> = if max_order >= 2 {
            let jet = TwoLayerJet::new(net, &trace, max_order).unwrap();
            alphas.iter().map(|a| jet.partial(a).unwrap()).collect()
        } else {
            let g = gradient(net, &trace).unwrap();
            alphas.iter().map(|a| if a.order() == 0 { trace.output } else { g[a.axes()[0]] }).collect()
        };
        for ((alpha, e), v) in alphas.iter().zip(&envs).zip(values) {
            if alpha.order() > 0 {
                sweep.checks += 1;
                if !within((v - e.center_value).abs(), e.diff_bound, e.center_value) {
                    sweep.violations += 1;
                }
            }
            sweep.checks += 1;
            if !within(v.abs(), e.total, e.center_value) {
                sweep.violations += 1;
            }
        }
    }
    sweep
}

/// Checks `|grad z^k_j(x)| <= E^k_j` and
/// `|mu^(m)(z^k_j(x)) - mu^(m)(z^k_j(y))| <= Q^{k,m}_j` at `n` samples.
pub fn activation_sweep(net: &Network, cell: &BoxSpec, rng: &mut ChaCha8Rng, n: usize, max_order: usize) -> Sweep {
    use certiquad_core::bounds::propagate;
    use certiquad_core::exact_derivs::preactivation_jacobians;
    let env = propagate(net, cell, max_order).unwrap();
    let act = net.activation();
    let center = net.forward(&cell.center).unwrap();
    let mut sweep = Sweep::default();
    for x in box_samples(rng, cell, n) {
        let trace = net.forward(&x).unwrap();
        let jac = preactivation_jacobians(net, &trace);
        for k in 1..=net.depth() {
            let e = env.grad_bound(k);
            for (j, row) in jac[k - 1].rows().into_iter().enumerate() {
                let norm = row.dot(&row).sqrt();
                sweep.checks += 1;
                if !within(norm, e[j], e[j]) {
                    sweep.violations += 1;
                }
                let (zx, zy) = (trace.preactivations[k - 1][j], center.preactivations[k - 1][j]);
                for m in 1..=max_order {
                    let diff = (act.derivative(m, zx).unwrap() - act.derivative(m, zy).unwrap()).abs();
                    sweep.checks += 1;
                    if !within(diff, env.q(k, m)[j], act.derivative(m, zy).unwrap()) {
                        sweep.violations += 1;
                    }
                }
            }
        }
    }
    sweep
}

/// A box of side `eps` centred uniformly in `[-1, 1]^d`.
pub fn random_box(rng: &mut ChaCha8Rng, d: usize, eps: f64) -> BoxSpec {
    BoxSpec::new(random_point(rng, d, 1.0), eps).unwrap()
}

/// Midpoint-rule values of `|d^alpha f|_p^p` for several `p` on a grid of
/// spacing `h`, all from one pass.
pub fn fine_reference(net: &Network, alpha: &certiquad_core::MultiIndex, lower: &[f64], upper: &[f64], h: f64, ps: &[u32]) -> Vec<f64> {
    use certiquad_core::exact_derivs::partial;
    use certiquad_core::quadrature::Cells;
    let grid = certiquad_core::UniformGrid::new(lower, upper, h).unwrap();
    let vol = h.powi(lower.len() as i32);
    let mut sums = vec![certiquad_core::quadrature::CompensatedSum::default(); ps.len()];
    for i in 0..grid.len() {
        let y = grid.center(i);
        let v = partial(net, alpha, &net.forward(&y).unwrap()).unwrap().abs();
        for (s, &p) in sums.iter_mut().zip(ps) {
            s.add(vol * v.powi(p as i32));
        }
    }
    sums.iter().map(|s| s.value()).collect()
}

/// `f(x) = relu(x)`, equal to `x` on `[0, 1]`.
pub fn relu_identity() -> Network {
    use ndarray::array;
    let layer = || AffineLayer::new(array![[1.0]], array![0.0]).unwrap();
    Network::new(1, Activation::Relu, vec![layer(), layer()]).unwrap()
}

/// Exact solution for sine-product initial data:
/// `A exp(-kappa pi^2 |m|^2 t) prod_i sin(m_i pi x_i)`.
pub fn sine_solution(problem: &certiquad_core::HeatProblem, x: &[f64], t: f64) -> f64 {
    use certiquad_core::InitialCondition;
    match &problem.initial {
        InitialCondition::SineProduct { frequencies, .. } => {
            let m2: f64 = frequencies.iter().map(|&m| (m * m) as f64).sum();
            (-problem.kappa * std::f64::consts::PI.powi(2) * m2 * t).exp() * problem.initial.value(x)
        }
        InitialCondition::Zero => 0.0,
    }
}

/// `max_t |u(., t) - chi f(., t)|_{L2(U)}` over `slices` equispaced times in
/// `[0, T]`, each norm by the midpoint rule with `points` nodes per slice.
/// One spatial dimension only.
pub fn reference_error(net: &Network, problem: &certiquad_core::HeatProblem, slices: usize, points: usize) -> f64 {
    assert_eq!(problem.d, 2);
    let h = 2.0 / points as f64;
    (0..slices)
        .map(|s| {
            let t = problem.t_final * s as f64 / (slices - 1) as f64;
            let sq: f64 = (0..points)
                .map(|i| {
                    let x = -1.0 + (i as f64 + 0.5) * h;
                    let v = (1.0 - x * x) * net.value(&[x, t]).unwrap();
                    let e = sine_solution(problem, &[x], t) - v;
                    e * e * h
                })
                .sum();
            sq.sqrt()
        })
        .fold(0.0, f64::max)
}

pub fn sine_problem() -> certiquad_core::HeatProblem {
    use certiquad_core::{HeatProblem, InitialCondition};
    let pi = std::f64::consts::PI;
    HeatProblem::new(2, 1.0 / (pi * pi), 1.0, InitialCondition::sine(vec![1])).unwrap()
}
