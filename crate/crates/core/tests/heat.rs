mod common;

use certiquad_core::heat::{
    default_eps_init, energy_error_bound, global_verify, init_certificate, initial_face, local_verify,
    phi_init, phi_init_gradient_bound, phi_pde, phi_pde_gradient_bound, residual_norm_certificates, InitResidual,
    LocalVerifier, PdeResidual,
};
use certiquad_core::quadrature::{Cells, LocalIntegrand};
use certiquad_core::{Activation, BoxSpec, Error, HeatProblem, InitialCondition, Network, ProblemConfig, Verdict};
use common::*;

fn small_net(seed: u64, d: usize) -> Network {
    random_net(&mut rng(seed), d, &[6, 5], Activation::Repu(3))
}

fn v_of(net: &Network) -> impl Fn(&[f64]) -> f64 + '_ {
    move |x: &[f64]| {
        let chi: f64 = x[..x.len() - 1].iter().map(|xi| 1.0 - xi * xi).product();
        chi * net.value(x).unwrap()
    }
}

#[test]
fn phi_pde_matches_finite_differences() {
    let mut rng = rng(51);
    for d in [2, 3] {
        let problem = HeatProblem::new(d, 0.3, 1.0, InitialCondition::Zero).unwrap();
        for seed in 0..8 {
            let net = small_net(seed, d);
            let v = v_of(&net);
            let mut x = smooth_point(&net, &mut rng);
            x[d - 1] = x[d - 1].abs();
            let t = d - 1;
            let mut fd = fd_first(&v, &x, t, 1e-5);
            for i in 0..t {
                fd -= problem.kappa * fd_second(&v, &x, i, i, 1e-4);
            }
            let exact = phi_pde(&net, &problem, &x).unwrap();
            assert!((exact - fd).abs() <= 1e-5 * (1.0 + exact.abs()), "{exact} vs {fd}");
        }
    }
}

#[test]
fn phi_init_is_chi_f_minus_g() {
    let problem = sine_problem();
    let net = small_net(3, 2);
    for x in [-0.9, -0.2, 0.0, 0.4, 1.0] {
        let expected = (1.0 - x * x) * net.value(&[x, 0.0]).unwrap() - (std::f64::consts::PI * x).sin();
        assert!((phi_init(&net, &problem, &[x]).unwrap() - expected).abs() < 1e-14);
    }
}

#[test]
fn residual_bounds_hold_on_boxes() {
    let mut rng = rng(52);
    for d in [2, 3] {
        let problem = HeatProblem::new(d, 0.7, 1.0, InitialCondition::sine(vec![1; d - 1])).unwrap();
        for seed in 0..6 {
            let net = small_net(100 + seed, d);
            for eps in [0.2, 0.05] {
                let mut center = random_point(&mut rng, d, 0.9);
                center[d - 1] = center[d - 1].abs();
                let cell = BoxSpec::new(center, eps).unwrap();
                let s = PdeResidual { net: &net, problem: &problem }.sample(&cell).unwrap();
                let grad_bound = phi_pde_gradient_bound(&net, &problem, &cell).unwrap();
                assert_eq!(grad_bound, s.gradient_bound);
                let phi = |x: &[f64]| phi_pde(&net, &problem, x).unwrap();
                for x in box_samples(&mut rng, &cell, 300) {
                    let value = phi(&x);
                    assert!(value.abs() <= s.value_bound * (1.0 + 1e-10) + 1e-10, "{value} > {}", s.value_bound);
                    if same_pattern(&net, &stencil(&x, 1e-5), 1e-6) {
                        let g: f64 = (0..d).map(|l| fd_first(&phi, &x, l, 1e-5).powi(2)).sum::<f64>().sqrt();
                        assert!(g <= grad_bound * (1.0 + 1e-6) + 1e-6, "|grad phi| {g} > {grad_bound}");
                    }
                }

                let space = BoxSpec::new(cell.center[..d - 1].to_vec(), eps).unwrap();
                let s0 = InitResidual { net: &net, problem: &problem }.sample(&space).unwrap();
                let g0 = phi_init_gradient_bound(&net, &problem, &space).unwrap();
                let phi0 = |x: &[f64]| phi_init(&net, &problem, x).unwrap();
                for x in box_samples(&mut rng, &space, 300) {
                    assert!(phi0(&x).abs() <= s0.value_bound * (1.0 + 1e-10) + 1e-10);
                    let g: f64 = (0..d - 1).map(|l| fd_first(&phi0, &x, l, 1e-6).powi(2)).sum::<f64>().sqrt();
                    assert!(g <= g0 * (1.0 + 1e-6) + 1e-6, "|grad phi_0| {g} > {g0}");
                }
            }
        }
    }
}

#[test]
fn initial_face_is_space_grid() {
    let problem = HeatProblem::new(3, 1.0, 0.5, InitialCondition::Zero).unwrap();
    let face = initial_face(&problem.spacetime_grid(0.125).unwrap()).unwrap();
    let space = problem.space_grid(0.125).unwrap();
    assert_eq!(face.len(), space.len());
    for i in 0..face.len() {
        assert_eq!(face.cell(i), space.cell(i));
    }
}

#[test]
fn face_volume_tiles_space() {
    for d in [2, 3, 4] {
        let problem = HeatProblem::new(d, 1.0, 1.0, InitialCondition::Zero).unwrap();
        let face = initial_face(&problem.spacetime_grid(0.25).unwrap()).unwrap();
        let vol: f64 = (0..face.len()).map(|i| face.cell(i).volume()).sum();
        let exact = 2f64.powi(d as i32 - 1);
        assert!((vol - exact).abs() <= 1e-9 * exact);
    }
}

struct Phi0<'a>(&'a Network, &'a HeatProblem);

impl LocalIntegrand for Phi0<'_> {
    fn dim(&self) -> usize {
        1
    }
    fn sample(&self, cell: &BoxSpec) -> certiquad_core::Result<certiquad_core::quadrature::LocalSample> {
        let value = phi_init(self.0, self.1, &cell.center)?;
        Ok(certiquad_core::quadrature::LocalSample { value, value_bound: value.abs(), gradient_bound: 0.0 })
    }
}

#[test]
fn init_estimate_is_plain_quadrature_of_phi0() {
    let problem = sine_problem();
    let net = small_net(311, 2);
    let eps = 0.02;
    let cert = init_certificate(&net, &problem, eps).unwrap();
    let plain = certiquad_core::quadrature::certify(
        &Phi0(&net, &problem),
        &problem.space_grid(eps).unwrap(),
        2,
        certiquad_core::MultiIndex::zero(1),
    )
    .unwrap();
    assert!((cert.estimate - plain.estimate).abs() <= 1e-12 * cert.estimate);
}

#[test]
fn zero_net_bound_covers_true_error() {
    let problem = sine_problem();
    let net = Network::zeros(2, &[4, 4], Activation::Repu(3)).unwrap();
    let certs = residual_norm_certificates(&net, &problem, 0.1).unwrap();
    assert_eq!(certs.pde.estimate, 0.0);
    assert!(certs.init.contains_power(1.0));
    assert!(energy_error_bound(&certs, &problem) >= 1.0);
}

#[test]
fn bound_covers_reference_error_for_random_nets() {
    let problem = sine_problem();
    for seed in 0..3 {
        let net = small_net(200 + seed, 2);
        let certs = residual_norm_certificates(&net, &problem, 0.05).unwrap();
        let bound = energy_error_bound(&certs, &problem);
        let reference = reference_error(&net, &problem, 20, 2000);
        assert!(bound >= reference, "{bound} < {reference}");
    }
}

#[test]
fn zero_net_with_zero_data_certifies_at_once() {
    let problem = HeatProblem::new(2, 0.5, 1.0, InitialCondition::Zero).unwrap();
    let net = Network::zeros(2, &[3, 3], Activation::Repu(3)).unwrap();
    let out = local_verify(&net, &problem, 0.1, 0.1, 3).unwrap();
    assert_eq!(out.verdict, Verdict::Certified);
    assert_eq!(out.iterations, 1);
    assert_eq!(out.certified_bound, 0.0);
    assert_eq!(out.eps_final, 0.1);
}

#[test]
fn budget_exhaustion_reports_smallest_bound() {
    let problem = sine_problem();
    let net = Network::zeros(2, &[3, 3], Activation::Repu(3)).unwrap();
    let out = local_verify(&net, &problem, 0.5, 0.25, 2).unwrap();
    assert_eq!(out.verdict, Verdict::BudgetExhausted);
    assert_eq!(out.iterations, 3);
    let eps: Vec<f64> = out.history.iter().map(|r| r.eps).collect();
    assert_eq!(eps, vec![0.25, 0.125, 0.0625]);
    let best = out.history.iter().map(|r| r.bound).fold(f64::INFINITY, f64::min);
    assert_eq!(out.certified_bound, best);
    assert!(best >= 1.0);
    assert_eq!(out.certificates.eps, out.eps_final);
}

#[test]
fn refinement_shrinks_error_terms() {
    let problem = sine_problem();
    let net = small_net(310, 2);
    let history: Vec<_> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&eps| residual_norm_certificates(&net, &problem, eps).unwrap())
        .collect();
    for w in history.windows(2) {
        assert!(w[0].pde.error_bound >= 1.4 * w[1].pde.error_bound);
        assert!(w[0].init.error_bound >= 1.4 * w[1].init.error_bound);
    }
}

#[test]
fn stepping_matches_run() {
    let problem = sine_problem();
    let net = small_net(301, 2);
    let mut v = LocalVerifier::new(&net, &problem, 0.5, 0.5, 1).unwrap();
    let first = v.step().unwrap().cloned();
    if first.is_none() {
        assert!(!v.is_done());
        v.step().unwrap();
    }
    assert!(v.is_done());
    let mut stepped = v.outcome().cloned().unwrap();
    let mut ran = local_verify(&net, &problem, 0.5, 0.5, 1).unwrap();
    for o in [&mut stepped, &mut ran] {
        o.certificates.pde.wall_time_ms = 0;
        o.certificates.init.wall_time_ms = 0;
    }
    assert_eq!(stepped, ran);
}

#[test]
fn global_picks_first_certified() {
    let problem = HeatProblem::new(2, 0.5, 1.0, InitialCondition::Zero).unwrap();
    let zero = Network::zeros(2, &[3, 3], Activation::Repu(3)).unwrap();
    let noisy = small_net(302, 2);
    let (index, out) = global_verify(&[noisy.clone(), zero.clone(), zero], &problem, 0.1, 0.1, 2).unwrap();
    assert_eq!(index, 1);
    assert_eq!(out.verdict, Verdict::Certified);
    assert!(global_verify(&[], &problem, 0.1, 0.1, 2).is_err());

    let sine = sine_problem();
    let zero = Network::zeros(2, &[3, 3], Activation::Repu(3)).unwrap();
    let tiny = Network::zeros(2, &[2, 2], Activation::Repu(3)).unwrap();
    let (index, out) = global_verify(&[noisy.clone(), zero, tiny], &sine, 0.5, 0.5, 1).unwrap();
    assert_eq!(out.verdict, Verdict::BudgetExhausted);
    let a = local_verify(&noisy, &sine, 0.5, 0.5, 1).unwrap().certified_bound;
    let b = out.certified_bound;
    assert_eq!(index, if a < b { 0 } else { 1 });
}

#[test]
fn input_errors() {
    let problem = sine_problem();
    let net = small_net(304, 2);
    assert!(matches!(local_verify(&net, &problem, 0.1, 0.2, 1), Err(Error::Input(_))));
    assert!(matches!(local_verify(&net, &problem, 0.1, 0.03, 1), Err(Error::GridMismatch { .. })));
    assert!(matches!(local_verify(&small_net(305, 3), &problem, 0.1, 0.1, 1), Err(Error::Shape(_))));
    let relu = random_net(&mut rng(306), 2, &[3, 3], Activation::Relu);
    assert!(local_verify(&relu, &problem, 0.1, 0.1, 1).unwrap_err().is_capability());
    let deep = random_net(&mut rng(307), 2, &[3, 3, 3], Activation::Repu(3));
    assert!(init_certificate(&deep, &problem, 0.1).unwrap_err().is_capability());
    assert!(HeatProblem::new(1, 1.0, 1.0, InitialCondition::Zero).is_err());
    assert!(HeatProblem::new(2, -1.0, 1.0, InitialCondition::Zero).is_err());
    assert!(HeatProblem::new(2, 1.0, 1.0, InitialCondition::sine(vec![1, 1])).is_err());
}

#[test]
fn default_spacing_divides_both_extents() {
    let problem = HeatProblem::new(2, 1.0, 0.3, InitialCondition::Zero).unwrap();
    let eps = default_eps_init(&problem, 0.07).unwrap();
    assert!(eps <= 0.07);
    assert!(problem.spacetime_grid(eps).is_ok());
    assert!((eps - 0.05).abs() < 1e-12);
}

#[test]
fn problem_config_from_json() {
    let text = r#"{"kappa": 0.101321, "T": 1.0, "d": 2,
        "initial": {"kind": "sine_product", "amplitude": 1.0, "frequencies": [1]},
        "eps0": 0.2, "max_refinements": 4}"#;
    let config = ProblemConfig::from_json_str(text).unwrap();
    assert_eq!(config.resolved_eps_init().unwrap(), 0.2);
    assert_eq!(config.problem().unwrap().space_dim(), 1);
    let zero = r#"{"kappa": 1, "T": 1, "d": 3, "initial": {"kind": "zero"}, "eps0": 0.1, "eps_init": 0.05, "max_refinements": 0}"#;
    assert_eq!(ProblemConfig::from_json_str(zero).unwrap().resolved_eps_init().unwrap(), 0.05);
    assert!(ProblemConfig::from_json_str("{\"kappa\": 1}").is_err());
}
