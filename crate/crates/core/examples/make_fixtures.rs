//! Regenerates the committed test fixtures:
//!
//!     cargo run --release -p certiquad-core --example make_fixtures [OUT_DIR]
//!
//! Candidate solutions of `u_t = u_xx / pi^2` on `[-1, 1] x [0, 1]` with
//! `u(x, 0) = sin(pi x)`, exact solution `sin(pi x) exp(-t)`. Each candidate is
//! `v = chi f` for a two-hidden-layer RePU(3) network `f`.
//!
//! The first layer is a fixed seeded random feature map. The second hidden layer
//! and the output layer are fitted with Levenberg-Marquardt on the collocation
//! loss `mean phi_pde^2 + w0 mean phi_0^2`, using the closed-form Jacobian of the
//! residuals. Snapshots after a few iterations serve as "training checkpoints".

use std::f64::consts::PI;
use std::path::PathBuf;

use certiquad_core::heat::{phi_init, phi_pde, HeatProblem, InitialCondition};
use certiquad_core::{Activation, AffineLayer, Network};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;

const D_IN: usize = 2;
const WIDTH1: usize = 24;
const WIDTH2: usize = 24;
const KAPPA: f64 = 1.0 / (PI * PI);
const INIT_WEIGHT: f64 = 2.0;
const DECAY: f64 = 1e-4;
const ITERATIONS: usize = 200;
const CHECKPOINTS: [usize; 3] = [2, 10, ITERATIONS];

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn mu(m: usize, t: f64) -> f64 {
    Activation::Repu(3).derivative(m, t).unwrap()
}

/// Trainable parameters, flattened as `(W^2, b^2, W^3, b^3, W^1, b^1)`.
struct Params {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array1<f64>,
    b3: f64,
}

impl Params {
    fn len() -> usize {
        Self::analytic_len() + WIDTH1 * (D_IN + 1)
    }

    /// Parameters with a closed-form Jacobian; the first layer comes after.
    fn analytic_len() -> usize {
        WIDTH2 * WIDTH1 + 2 * WIDTH2 + 1
    }

    fn flat(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.w2.iter().copied().collect();
        v.extend(self.b2.iter());
        v.extend(self.w3.iter());
        v.push(self.b3);
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        DVector::from_vec(v)
    }

    fn from_flat(v: &DVector<f64>) -> Self {
        let s = v.as_slice();
        let n = WIDTH2 * WIDTH1;
        let m = Self::analytic_len();
        Self {
            w1: Array2::from_shape_vec((WIDTH1, D_IN), s[m..m + WIDTH1 * D_IN].to_vec()).unwrap(),
            b1: Array1::from(s[m + WIDTH1 * D_IN..].to_vec()),
            w2: Array2::from_shape_vec((WIDTH2, WIDTH1), s[..n].to_vec()).unwrap(),
            b2: Array1::from(s[n..n + WIDTH2].to_vec()),
            w3: Array1::from(s[n + WIDTH2..n + 2 * WIDTH2].to_vec()),
            b3: s[n + 2 * WIDTH2],
        }
    }
}

/// First-layer activations and their `x`, `t`, `xx` derivatives at a point.
struct Features {
    a: Array1<f64>,
    ax: Array1<f64>,
    at: Array1<f64>,
    axx: Array1<f64>,
}

impl Params {
    fn features(&self, x: f64, t: f64) -> Features {
        let wx = self.w1.column(0);
        let wt = self.w1.column(1);
        let z = wx.mapv(|w| w * x) + wt.mapv(|w| w * t) + &self.b1;
        Features {
            a: z.mapv(|v| mu(0, v)),
            ax: z.mapv(|v| mu(1, v)) * wx,
            at: z.mapv(|v| mu(1, v)) * wt,
            axx: z.mapv(|v| mu(2, v)) * wx * wx,
        }
    }
}

enum Sample {
    Pde { x: f64, t: f64, weight: f64 },
    Init { x: f64, weight: f64 },
}

fn samples() -> Vec<Sample> {
    let mut out = Vec::new();
    let (nx, nt) = (60, 30);
    let w = 1.0 / ((nx * nt) as f64).sqrt();
    for i in 0..nx {
        for k in 0..nt {
            let x = -1.0 + (i as f64 + 0.5) * 2.0 / nx as f64;
            let t = (k as f64 + 0.5) / nt as f64;
            out.push(Sample::Pde { x, t, weight: w });
        }
    }
    let n0 = 120;
    let w = INIT_WEIGHT / (n0 as f64).sqrt();
    for i in 0..n0 {
        let x = -1.0 + (i as f64 + 0.5) * 2.0 / n0 as f64;
        out.push(Sample::Init { x, weight: w });
    }
    out
}

/// Weighted residuals and their Jacobian with respect to the flat parameters.
fn residuals(p: &Params, samples: &[Sample], with_jacobian: bool) -> (DVector<f64>, DMatrix<f64>) {
    let n = Params::len();
    let mut r = DVector::zeros(samples.len());
    let mut jac = DMatrix::zeros(if with_jacobian { samples.len() } else { 0 }, n);
    let off_b2 = WIDTH2 * WIDTH1;
    let off_w3 = off_b2 + WIDTH2;
    let off_b3 = off_w3 + WIDTH2;
    for (row, s) in samples.iter().enumerate() {
        let (feat, weight) = match *s {
            Sample::Pde { x, t, weight } => (p.features(x, t), weight),
            Sample::Init { x, weight } => (p.features(x, 0.0), weight),
        };
        let z = p.w2.dot(&feat.a) + &p.b2;
        let m: Vec<Array1<f64>> = (0..4).map(|k| z.mapv(|v| mu(k, v))).collect();
        match s {
            Sample::Pde { x, .. } => {
                let sx = p.w2.dot(&feat.ax);
                let st = p.w2.dot(&feat.at);
                let sxx = p.w2.dot(&feat.axx);
                let (c, cx, cxx) = (1.0 - x * x, -2.0 * x, -2.0);
                let dw3 = &m[1] * &st * c
                    - (&m[0] * cxx + &m[1] * &sx * (2.0 * cx) + (&m[2] * &sx * &sx + &m[1] * &sxx) * c) * KAPPA;
                r[row] = weight * (p.w3.dot(&dw3) - KAPPA * cxx * p.b3);
                if with_jacobian {
                    for j in 0..WIDTH2 {
                        let w = p.w3[j];
                        let alpha = w * (c * m[2][j] * st[j]
                            - KAPPA
                                * (cxx * m[1][j]
                                    + 2.0 * cx * m[2][j] * sx[j]
                                    + c * (m[3][j] * sx[j] * sx[j] + m[2][j] * sxx[j])));
                        let beta = -w * KAPPA * (2.0 * cx * m[1][j] + 2.0 * c * m[2][j] * sx[j]);
                        let gamma = w * c * m[1][j];
                        let delta = -w * KAPPA * c * m[1][j];
                        for k in 0..WIDTH1 {
                            jac[(row, j * WIDTH1 + k)] = weight
                                * (alpha * feat.a[k] + beta * feat.ax[k] + gamma * feat.at[k] + delta * feat.axx[k]);
                        }
                        jac[(row, off_b2 + j)] = weight * alpha;
                        jac[(row, off_w3 + j)] = weight * dw3[j];
                    }
                    jac[(row, off_b3)] = -weight * KAPPA * cxx;
                }
            }
            Sample::Init { x, .. } => {
                let c = 1.0 - x * x;
                r[row] = weight * (c * (p.w3.dot(&m[0]) + p.b3) - (PI * x).sin());
                if with_jacobian {
                    for j in 0..WIDTH2 {
                        let g = weight * c * p.w3[j] * m[1][j];
                        for k in 0..WIDTH1 {
                            jac[(row, j * WIDTH1 + k)] = g * feat.a[k];
                        }
                        jac[(row, off_b2 + j)] = g;
                        jac[(row, off_w3 + j)] = weight * c * m[0][j];
                    }
                    jac[(row, off_b3)] = weight * c;
                }
            }
        }
    }
    if with_jacobian {
        // first layer by central differences
        let theta = p.flat();
        for col in Params::analytic_len()..n {
            let h = 1e-6 * (1.0 + theta[col].abs());
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[col] += h;
            minus[col] -= h;
            let (rp, _) = residuals(&Params::from_flat(&plus), samples, false);
            let (rm, _) = residuals(&Params::from_flat(&minus), samples, false);
            jac.set_column(col, &((rp - rm) / (2.0 * h)));
        }
    }
    (r, jac)
}

fn objective(theta: &DVector<f64>, samples: &[Sample]) -> f64 {
    let (r, _) = residuals(&Params::from_flat(theta), samples, false);
    r.norm_squared() + DECAY * theta.norm_squared()
}

fn to_net(p: &Params) -> Network {
    let layers = vec![
        AffineLayer::new(p.w1.clone(), p.b1.clone()).unwrap(),
        AffineLayer::new(p.w2.clone(), p.b2.clone()).unwrap(),
        AffineLayer::new(p.w3.clone().insert_axis(ndarray::Axis(0)), Array1::from(vec![p.b3])).unwrap(),
    ];
    Network::new(D_IN, Activation::Repu(3), layers).unwrap()
}

fn init_params(seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Params {
        w1: Array2::from_shape_fn((WIDTH1, D_IN), |(_, j)| {
            gauss(&mut rng) * if j == 0 { 1.0 } else { 0.7 }
        }),
        b1: Array1::from_shape_fn(WIDTH1, |_| rng.random_range(-0.5..1.0)),
        w2: Array2::from_shape_fn((WIDTH2, WIDTH1), |_| gauss(&mut rng) * 0.6 / (WIDTH1 as f64).sqrt()),
        b2: Array1::from_shape_fn(WIDTH2, |_| rng.random_range(-0.2..0.6)),
        w3: Array1::from_shape_fn(WIDTH2, |_| gauss(&mut rng) * 0.3),
        b3: 0.0,
    }
}

/// Replaces the output layer by the least-squares fit for fixed hidden layers.
fn warm_start(p: &Params, samples: &[Sample]) -> DVector<f64> {
    let (r, jac) = residuals(p, samples, true);
    let off = WIDTH2 * WIDTH1 + WIDTH2;
    let cols = jac.columns(off, WIDTH2 + 1).into_owned();
    // residual is affine in the output layer: r = cols * w_out + r_const
    let theta = p.flat();
    let w_out = theta.rows(off, WIDTH2 + 1).into_owned();
    let r_const = r - &cols * &w_out;
    let ata = cols.tr_mul(&cols) + DMatrix::identity(WIDTH2 + 1, WIDTH2 + 1) * 1e-10;
    let w = ata.cholesky().unwrap().solve(&(-cols.tr_mul(&r_const)));
    let mut out = theta;
    out.rows_mut(off, WIDTH2 + 1).copy_from(&w);
    out
}

/// Largest gap between the hand-written Jacobian and central differences.
fn check_jacobian(p: &Params, samples: &[Sample]) -> f64 {
    let theta = p.flat();
    let (_, jac) = residuals(p, samples, true);
    let mut worst: f64 = 0.0;
    for col in [0, 7, WIDTH2 * WIDTH1 + 3, WIDTH2 * WIDTH1 + WIDTH2 + 5, Params::len() - 1] {
        let h = 1e-6;
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[col] += h;
        minus[col] -= h;
        let (rp, _) = residuals(&Params::from_flat(&plus), samples, false);
        let (rm, _) = residuals(&Params::from_flat(&minus), samples, false);
        let fd = (rp - rm) / (2.0 * h);
        worst = worst.max((fd - jac.column(col)).amax() / (1.0 + jac.column(col).amax()));
    }
    worst
}

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/core/tests/fixtures".into()));
    std::fs::create_dir_all(&out).unwrap();

    let samples = samples();
    let start = init_params(11);
    let jac_err = check_jacobian(&start, &samples);
    assert!(jac_err < 1e-5, "Jacobian check failed: {jac_err:e}");

    to_net(&start).save(out.join("random_net.json")).unwrap();
    Network::zeros(D_IN, &[WIDTH1, WIDTH2], Activation::Repu(3)).unwrap().save(out.join("zero_net.json")).unwrap();

    let n = Params::len();
    let mut theta = warm_start(&start, &samples);
    let mut obj = objective(&theta, &samples);
    let mut lambda = 1e-2;
    println!("iter {:>4}: objective {obj:.4e}", 0);
    for iter in 1..=ITERATIONS {
        let (r, jac) = residuals(&Params::from_flat(&theta), &samples, true);
        let jtj = jac.tr_mul(&jac);
        let floor = 1e-6 * jtj.diagonal().max();
        let grad = jac.tr_mul(&r) + &theta * DECAY;
        loop {
            let mut sys = jtj.clone();
            for i in 0..n {
                sys[(i, i)] += lambda * jtj[(i, i)].max(floor) + DECAY;
            }
            if let Some(chol) = sys.cholesky() {
                let trial = &theta - chol.solve(&grad);
                let trial_obj = objective(&trial, &samples);
                if trial_obj < obj {
                    theta = trial;
                    obj = trial_obj;
                    lambda = (lambda / 3.0).max(1e-12);
                    break;
                }
            }
            lambda *= 4.0;
            if lambda > 1e12 {
                break;
            }
        }
        if iter % 10 == 0 || CHECKPOINTS.contains(&iter) {
            println!("iter {iter:>4}: objective {obj:.4e} lambda {lambda:.1e}");
        }
        if CHECKPOINTS.contains(&iter) {
            let net = to_net(&Params::from_flat(&theta));
            net.save(out.join(format!("checkpoint_{iter:04}.json"))).unwrap();
            if iter == ITERATIONS {
                net.save(out.join("trained_net.json")).unwrap();
            }
        }
    }

    let net = to_net(&Params::from_flat(&theta));
    let problem = HeatProblem::new(2, KAPPA, 1.0, InitialCondition::sine(vec![1])).unwrap();
    let mut max_err: f64 = 0.0;
    let mut max_pde: f64 = 0.0;
    let mut max_init: f64 = 0.0;
    for i in 0..=40 {
        let x = -1.0 + i as f64 * 0.05;
        max_init = max_init.max(phi_init(&net, &problem, &[x]).unwrap().abs());
        for k in 0..=10 {
            let t = k as f64 * 0.1;
            let v = (1.0 - x * x) * net.value(&[x, t]).unwrap();
            max_err = max_err.max((v - (PI * x).sin() * (-t).exp()).abs());
            max_pde = max_pde.max(phi_pde(&net, &problem, &[x, t]).unwrap().abs());
        }
    }
    println!("max |u - v| {max_err:.3e}, max |phi_pde| {max_pde:.3e}, max |phi_0| {max_init:.3e}");
}
