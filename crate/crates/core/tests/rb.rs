use apcms_core::archetype::{Archetype, InteriorSolver, ParameterDomain, PortModeKind};
use apcms_core::mesh::shapes::{rectangle, rectangle_side, with_ports, Side, TAG_LEFT};
use apcms_core::mesh::PortGeometry;
use apcms_core::rb::{greedy_train, rb_bubble, rb_force_bubble, targets, train_all, GreedyOptions, RbSpace, Target};
use proptest::prelude::*;

const DOMAIN: ParameterDomain = ParameterDomain {
    e_min: 1e10,
    e_max: 3e11,
    nu_min: 0.2,
    nu_max: 0.4,
};

/// Cantilever with the left side clamped and one port on the right.
fn cantilever(domain: ParameterDomain) -> Archetype {
    let (nx, ny) = (8, 3);
    let m = rectangle([0.0, 0.0], [3.0, 1.0], nx, ny);
    let m = with_ports(m, vec![("tip".into(), rectangle_side(nx, ny, Side::Right), PortGeometry::Straight)]).unwrap();
    Archetype::build("cantilever", m, domain, vec![TAG_LEFT], PortModeKind::Reduced(4)).unwrap()
}

fn truth(arch: &Archetype, s: &InteriorSolver, target: Target, g: [f64; 2]) -> Vec<f64> {
    let full = match target {
        Target::Mode(k) => arch.solve_bubble_fe(s, &arch.extension(k)),
        Target::Force(_) => arch.solve_force_bubble_fe(s, g),
    };
    arch.restrict(&full)
}

fn rb(space: &RbSpace, e: f64, nu: f64, g: [f64; 2]) -> Vec<f64> {
    match space.target {
        Target::Mode(_) => rb_bubble(space, e, nu).unwrap(),
        Target::Force(_) => rb_force_bubble(space, e, nu, g).unwrap(),
    }
}

fn energy(s: &InteriorSolver, v: &[f64]) -> f64 {
    let av = s.matrix.mul_vec(v);
    v.iter().zip(&av).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
}

fn force_of(target: Target) -> [f64; 2] {
    match target {
        Target::Force(0) => [1.0, 0.0],
        Target::Force(_) => [0.0, 1.0],
        Target::Mode(_) => [0.0, 0.0],
    }
}

#[test]
fn infinite_tolerance_keeps_one_snapshot() {
    let arch = cantilever(DOMAIN);
    let xi = DOMAIN.grid(3, 3);
    let s = greedy_train(&arch, Target::Mode(0), &xi, f64::INFINITY, 25).unwrap();
    assert_eq!(s.dim(), 1);
}

#[test]
fn single_poisson_ratio_needs_one_basis_function() {
    let domain = ParameterDomain { nu_min: 0.3, nu_max: 0.3, ..DOMAIN };
    let arch = cantilever(domain);
    let xi = domain.grid(6, 1);
    for t in [Target::Mode(2), Target::Force(1)] {
        let s = greedy_train(&arch, t, &xi, 1e-10, 25).unwrap();
        assert_eq!(s.dim(), 1, "{t:?}");
        let solver = arch.interior_solver(7e10, 0.3).unwrap();
        let g = force_of(t);
        let exact = truth(&arch, &solver, t, g);
        let approx = rb(&s, 7e10, 0.3, g);
        let err: Vec<f64> = exact.iter().zip(&approx).map(|(a, b)| a - b).collect();
        assert!(energy(&solver, &err) <= 1e-10 * energy(&solver, &exact));
    }
}

#[test]
fn traces_are_monotone_and_training_points_meet_tolerance() {
    let arch = cantilever(DOMAIN);
    let opts = GreedyOptions { tol: 1e-6, n_max: 25, grid: [4, 4] };
    let spaces = train_all(&arch, &opts).unwrap();
    assert_eq!(spaces.len(), targets(&arch).len());
    for s in &spaces {
        for w in s.trace.windows(2) {
            assert!(w[1].error <= w[0].error, "{:?}: {} > {}", s.target, w[1].error, w[0].error);
        }
        let (e, nu) = arch.domain.grid(4, 4)[5];
        let solver = arch.interior_solver(e, nu).unwrap();
        let g = force_of(s.target);
        let exact = truth(&arch, &solver, s.target, g);
        let err: Vec<f64> = exact.iter().zip(rb(s, e, nu, g)).map(|(a, b)| a - b).collect();
        assert!(energy(&solver, &err) <= 1e-6 * energy(&solver, &exact) * 1.0001);
    }
}

#[test]
fn zero_load_gives_zero_force_bubble() {
    let arch = cantilever(DOMAIN);
    let s = greedy_train(&arch, Target::Force(1), &DOMAIN.grid(3, 3), 1e-6, 25).unwrap();
    assert!(rb_force_bubble(&s, 1e11, 0.3, [0.0, 0.0]).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn orthonormal_basis() {
    let arch = cantilever(DOMAIN);
    let s = greedy_train(&arch, Target::Mode(1), &DOMAIN.grid(4, 4), 1e-8, 25).unwrap();
    let g = s.basis.transpose() * &s.basis;
    for i in 0..s.dim() {
        for j in 0..s.dim() {
            assert!((g[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn galerkin_orthogonality_and_best_approximation(e in 1e10f64..3e11, nu in 0.2f64..0.4, t in 0usize..3) {
        let arch = cantilever(DOMAIN);
        let target = [Target::Mode(0), Target::Mode(3), Target::Force(1)][t];
        let space = greedy_train(&arch, target, &DOMAIN.grid(3, 3), 1e-3, 3).unwrap();
        let solver = arch.interior_solver(e, nu).unwrap();
        let g = force_of(target);
        let exact = truth(&arch, &solver, target, g);
        let approx = rb(&space, e, nu, g);
        let err: Vec<f64> = exact.iter().zip(&approx).map(|(a, b)| a - b).collect();

        // a(b̃ − b, ζ_i) = 0 for every basis vector
        let a_err = solver.matrix.mul_vec(&err);
        let a_exact = solver.matrix.mul_vec(&exact);
        let scale = a_exact.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..space.dim() {
            let r: f64 = (0..space.basis.nrows()).map(|i| space.basis[(i, j)] * a_err[i]).sum();
            prop_assert!(r.abs() <= 1e-10 * scale, "{r} vs {scale}");
        }

        // energy-norm error no worse than the orthogonal projection of the truth
        let coeffs: Vec<f64> = (0..space.dim())
            .map(|j| (0..space.basis.nrows()).map(|i| space.basis[(i, j)] * exact[i]).sum())
            .collect();
        let proj = space.expand(&coeffs);
        let perr: Vec<f64> = exact.iter().zip(&proj).map(|(a, b)| a - b).collect();
        prop_assert!(energy(&solver, &err) <= energy(&solver, &perr) * (1.0 + 1e-8));
    }
}
