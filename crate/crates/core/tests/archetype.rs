use apcms_core::archetype::{build_port_modes, interior_dofs, Archetype, ParameterDomain, PortModeKind};
use apcms_core::fem::{apply_dirichlet, body_load, solve_spd, AffineOperator};
use apcms_core::mesh::shapes::{rectangle, rectangle_side, with_ports, Side, TAG_BOTTOM, TAG_LEFT, TAG_RIGHT, TAG_TOP};
use apcms_core::mesh::{Mesh, PortGeometry};
use faer::Mat;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DOMAIN: ParameterDomain = ParameterDomain {
    e_min: 1e10,
    e_max: 3e11,
    nu_min: 0.2,
    nu_max: 0.4,
};

fn two_port_bar(nx: usize, ny: usize) -> Mesh {
    let m = rectangle([0.0, 0.0], [2.0, 1.0], nx, ny);
    with_ports(
        m,
        vec![
            ("left".into(), rectangle_side(nx, ny, Side::Left), PortGeometry::Straight),
            ("right".into(), rectangle_side(nx, ny, Side::Right), PortGeometry::Straight),
        ],
    )
    .unwrap()
}

fn bar(kind: PortModeKind) -> Archetype {
    Archetype::build("bar", two_port_bar(6, 4), DOMAIN, vec![], kind).unwrap()
}

fn orthonormality_defect(m: &Mat<f64>) -> f64 {
    let g = m.transpose() * m;
    let mut worst = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

fn interior_residual(arch: &Archetype, e: f64, nu: f64, phi: &[f64]) -> f64 {
    let r = arch.operator.apply(e, nu, phi);
    let ri: f64 = arch.interior.iter().map(|&d| r[d] * r[d]).sum::<f64>().sqrt();
    let scale = arch.operator.assemble(e, nu).max_abs() * phi.iter().map(|v| v * v).sum::<f64>().sqrt();
    ri / scale
}

#[test]
fn interior_count_excludes_port_nodes() {
    let n = 4;
    let m = with_ports(
        rectangle([0.0, 0.0], [1.0, 1.0], n, n),
        vec![("left".into(), rectangle_side(n, n, Side::Left), PortGeometry::Straight)],
    )
    .unwrap();
    let dofs = interior_dofs(&m, &[]);
    assert_eq!(dofs.len(), 2 * (25 - 5));
    let port = m.port_dofs(0);
    assert!(dofs.iter().all(|d| !port.contains(d)));
}

#[test]
fn all_port_mesh_has_no_interior() {
    let m = with_ports(
        rectangle([0.0, 0.0], [1.0, 1.0], 1, 1),
        vec![
            ("bottom".into(), rectangle_side(1, 1, Side::Bottom), PortGeometry::Straight),
            ("top".into(), rectangle_side(1, 1, Side::Top), PortGeometry::Straight),
        ],
    )
    .unwrap();
    assert!(interior_dofs(&m, &[]).is_empty());
}

#[test]
fn full_modes_on_four_nodes_are_the_identity() {
    let m = two_port_bar(3, 3);
    let s = build_port_modes(&m, 0, PortModeKind::Full).unwrap();
    assert_eq!((s.modes.nrows(), s.modes.ncols()), (8, 8));
    for i in 0..8 {
        for j in 0..8 {
            assert_eq!(s.modes[(i, j)], if i == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn complete_reduced_basis_spans_the_port_space() {
    let m = two_port_bar(3, 5);
    let s = build_port_modes(&m, 1, PortModeKind::Reduced(12)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = Mat::from_fn(12, 1, |_, _| rng.random_range(-1.0..1.0));
    let proj = &s.modes * (s.modes.transpose() * &v);
    let res: f64 = (0..12).map(|i| (proj[(i, 0)] - v[(i, 0)]).powi(2)).sum::<f64>().sqrt();
    assert!(res < 1e-12, "{res}");
}

#[test]
fn lowest_chain_modes_are_constant_per_component() {
    let m = two_port_bar(4, 4);
    let s = build_port_modes(&m, 0, PortModeKind::Reduced(2)).unwrap();
    let c = 1.0 / 5f64.sqrt();
    for col in 0..2 {
        let comp = (0..10).find(|&i| s.modes[(i, col)].abs() > 1e-8).unwrap() % 2;
        for node in 0..5 {
            assert!((s.modes[(2 * node + comp, col)].abs() - c).abs() < 1e-12);
            assert!(s.modes[(2 * node + 1 - comp, col)].abs() < 1e-12);
        }
    }
}

#[test]
fn too_many_modes_is_an_error() {
    let m = two_port_bar(3, 3);
    assert!(build_port_modes(&m, 0, PortModeKind::Reduced(10)).is_err());
}

#[test]
fn extension_traces_are_exact() {
    let arch = bar(PortModeKind::Reduced(4));
    for k in 0..arch.n_modes() {
        let (p, j) = arch.mode_port(k);
        let psi = arch.extension(k);
        for (q, _) in arch.mesh.ports.iter().enumerate() {
            for (r, &d) in arch.mesh.port_dofs(q).iter().enumerate() {
                let expected = if q == p { arch.port_spaces[p].modes[(r, j)] } else { 0.0 };
                assert_eq!(psi[d], expected);
            }
        }
    }
}

#[test]
fn extension_of_linear_data_is_linear() {
    let (nx, ny) = (5, 4);
    let m = rectangle([0.0, 0.0], [1.5, 1.0], nx, ny);
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let m = with_ports(
        m,
        vec![
            ("bottom".into(), rectangle_side(nx, ny, Side::Bottom), PortGeometry::Straight),
            ("top".into(), rectangle_side(nx, ny, Side::Top), PortGeometry::Straight),
            ("left".into(), (1..ny).map(|j| id(0, j)).collect(), PortGeometry::Straight),
            ("right".into(), (1..ny).map(|j| id(nx, j)).collect(), PortGeometry::Straight),
        ],
    )
    .unwrap();
    let arch = Archetype::build("patch", m, DOMAIN, vec![], PortModeKind::Full).unwrap();
    let lin = |p: [f64; 2]| [0.3 + 1.7 * p[0] - 0.4 * p[1], -1.1 + 0.2 * p[0] + 0.9 * p[1]];
    let mut u = vec![0.0; arch.mesh.n_dofs()];
    for (p, space) in arch.port_spaces.iter().enumerate() {
        let dofs = arch.mesh.port_dofs(p);
        let data: Vec<f64> = dofs.iter().map(|&d| lin(arch.mesh.nodes[d / 2])[d % 2]).collect();
        for k in 0..space.count() {
            let coeff: f64 = (0..dofs.len()).map(|r| space.modes[(r, k)] * data[r]).sum();
            let psi = arch.extension(arch.mode_offsets[p] + k);
            for (ui, pi) in u.iter_mut().zip(&psi) {
                *ui += coeff * pi;
            }
        }
    }
    for (v, p) in arch.mesh.nodes.iter().enumerate() {
        let e = lin(*p);
        assert!((u[2 * v] - e[0]).abs() < 1e-12 && (u[2 * v + 1] - e[1]).abs() < 1e-12);
    }
}

#[test]
fn zero_extension_and_zero_load_give_zero_bubbles() {
    let arch = bar(PortModeKind::Reduced(4));
    let s = arch.interior_solver(1e11, 0.3).unwrap();
    assert!(arch.solve_bubble_fe(&s, &vec![0.0; arch.mesh.n_dofs()]).iter().all(|&v| v == 0.0));
    assert!(arch.solve_force_bubble_fe(&s, [0.0, 0.0]).iter().all(|&v| v == 0.0));
}

#[test]
fn operator_harmonic_lifting_has_zero_bubble() {
    let arch = bar(PortModeKind::Reduced(4));
    let (e, nu) = (5e10, 0.25);
    let s = arch.interior_solver(e, nu).unwrap();
    let psi = arch.extension(1);
    let b = arch.solve_bubble_fe(&s, &psi);
    let phi: Vec<f64> = psi.iter().zip(&b).map(|(x, y)| x + y).collect();
    let again = arch.solve_bubble_fe(&s, &phi);
    let scale = phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(again.iter().all(|v| v.abs() <= 1e-10 * scale));
}

#[test]
fn force_bubble_is_linear_in_the_load() {
    let arch = bar(PortModeKind::Reduced(2));
    let s = arch.interior_solver(2e11, 0.3).unwrap();
    let one = arch.solve_force_bubble_fe(&s, [0.0, -8e4]);
    let two = arch.solve_force_bubble_fe(&s, [0.0, -1.6e5]);
    for (a, b) in one.iter().zip(&two) {
        assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-30));
    }
}

#[test]
fn clamped_square_force_bubble_is_the_monolithic_solution() {
    let n = 6;
    let m = rectangle([0.0, 0.0], [1.0, 1.0], n, n);
    let tags = vec![TAG_BOTTOM, TAG_RIGHT, TAG_TOP, TAG_LEFT];
    let arch = Archetype::build("box", m.clone(), DOMAIN, tags.clone(), PortModeKind::Full).unwrap();
    let g = [0.0, -8000.0 * 9.81];
    let (e, nu) = (2e11, 0.3);
    let bf = arch.solve_force_bubble_fe(&arch.interior_solver(e, nu).unwrap(), g);

    let k = AffineOperator::build(&m).unwrap().assemble(e, nu);
    let fixed: Vec<usize> = m.nodes_with_tags(&tags).iter().flat_map(|&v| [2 * v, 2 * v + 1]).collect();
    let red = apply_dirichlet(&k, &body_load(&m, g), &fixed, &vec![0.0; fixed.len()]);
    let u = red.expand(&solve_spd(&red.matrix, &red.load).unwrap());
    let scale = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(scale > 0.0);
    for (a, b) in bf.iter().zip(&u) {
        assert!((a - b).abs() <= 1e-10 * scale);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn port_modes_are_orthonormal(half in 1usize..6) {
        let m = two_port_bar(4, 5);
        let s = build_port_modes(&m, 0, PortModeKind::Reduced(2 * half)).unwrap();
        prop_assert!(orthonormality_defect(&s.modes) <= 1e-12);
    }

    #[test]
    fn bubble_plus_extension_is_operator_harmonic(e in 1e10f64..3e11, nu in 0.2f64..0.4) {
        let arch = bar(PortModeKind::Reduced(4));
        let s = arch.interior_solver(e, nu).unwrap();
        for k in 0..arch.n_modes() {
            let psi = arch.extension(k);
            let b = arch.solve_bubble_fe(&s, &psi);
            for &d in arch.mesh.port_dofs(0).iter().chain(&arch.mesh.port_dofs(1)) {
                prop_assert_eq!(b[d], 0.0);
            }
            let phi: Vec<f64> = psi.iter().zip(&b).map(|(x, y)| x + y).collect();
            prop_assert!(interior_residual(&arch, e, nu, &phi) <= 1e-9);
        }
    }
}
