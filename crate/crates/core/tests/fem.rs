use apcms_core::fem::{
    apply_dirichlet, assemble_direct, assemble_load, body_load, element_terms, rigid_body_modes, solve_spd, theta_lambda,
    theta_shear, von_mises, AffineOperator, MaterialParams,
};
use apcms_core::linalg::{dot, norm2, CscMatrix};
use apcms_core::mesh::shapes::{rectangle, TAG_LEFT, TAG_RIGHT, TAG_TOP};
use apcms_core::mesh::Mesh;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn plate() -> Mesh {
    rectangle([0.0, 0.0], [2.0, 1.0], 6, 3)
}

fn field_of(mesh: &Mesh, f: impl Fn(f64, f64) -> [f64; 2]) -> Vec<f64> {
    mesh.nodes.iter().flat_map(|p| f(p[0], p[1])).collect()
}

fn rel_diff(a: &CscMatrix, b: &CscMatrix) -> f64 {
    let (a, b) = (a.to_dense(), b.to_dense());
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            num += (a[(i, j)] - b[(i, j)]).powi(2);
            den += b[(i, j)].powi(2);
        }
    }
    (num / den).sqrt()
}

#[test]
fn reference_element_matches_hand_assembly() {
    // unit triangle, E = 1, ν = 0: K = (2·(BxxᵀBxx + ByyᵀByy) + γᵀγ) / 4
    let m4 = [
        [3.0, 1.0, -2.0, -1.0, -1.0, 0.0],
        [1.0, 3.0, 0.0, -1.0, -1.0, -2.0],
        [-2.0, 0.0, 2.0, 0.0, 0.0, 0.0],
        [-1.0, -1.0, 0.0, 1.0, 1.0, 0.0],
        [-1.0, -1.0, 0.0, 1.0, 1.0, 0.0],
        [0.0, -2.0, 0.0, 0.0, 0.0, 2.0],
    ];
    let p = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let (kl, ks) = element_terms(p).unwrap();
    let (cl, cs) = (theta_lambda(1.0, 0.0), theta_shear(1.0, 0.0));
    assert_eq!(cl, 0.0);
    assert_eq!(cs, 0.5);
    for r in 0..6 {
        for s in 0..6 {
            let k = cl * kl[r][s] + cs * ks[r][s];
            assert!((k - m4[r][s] / 4.0).abs() < 1e-15, "({r},{s}): {k}");
        }
    }
}

#[test]
fn zero_area_element_is_rejected() {
    assert!(element_terms([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).is_err());
}

#[test]
fn rigid_rotation_is_strain_free() {
    let m = plate();
    let op = AffineOperator::build(&m).unwrap();
    let u = field_of(&m, |x, y| [-y, x]);
    let au = op.apply(2e11, 0.3, &u);
    let scale = op.assemble(2e11, 0.3).max_abs() * norm2(&u);
    assert!(norm2(&au) <= 1e-10 * scale);
    let s = von_mises(&m, &u, &MaterialParams::new(2e11, 0.3));
    assert!(s.iter().all(|v| v.abs() < 1e-10 * 2e11));
}

#[test]
fn rigid_basis_has_zero_energy() {
    let m = plate();
    let k = AffineOperator::build(&m).unwrap().assemble(1.0, 0.25);
    for r in rigid_body_modes(&m) {
        let e = dot(&r, &k.mul_vec(&r));
        assert!(e.abs() < 1e-12 * dot(&r, &r), "{e}");
    }
}

#[test]
fn uniaxial_stretch_von_mises() {
    let m = plate();
    let alpha = 3e-3;
    let u = field_of(&m, |x, _| [alpha * x, 0.0]);
    let s = von_mises(&m, &u, &MaterialParams::new(1.0, 0.0));
    assert!(s.iter().all(|v| (v - alpha).abs() < 1e-15));
}

#[test]
fn zero_field_has_zero_stress() {
    let m = plate();
    let s = von_mises(&m, &vec![0.0; m.n_dofs()], &MaterialParams::new(1.0, 0.3));
    assert!(s.iter().all(|&v| v == 0.0));
}

#[test]
fn body_load_sums_to_force_times_area() {
    let m = plate();
    let f = body_load(&m, [2.5, -9.81]);
    let sx: f64 = f.iter().step_by(2).sum();
    let sy: f64 = f.iter().skip(1).step_by(2).sum();
    assert!((sx - 2.5 * 2.0).abs() < 1e-12);
    assert!((sy + 9.81 * 2.0).abs() < 1e-12);
    assert!(body_load(&m, [0.0, 0.0]).iter().all(|&v| v == 0.0));
}

#[test]
fn traction_sums_to_traction_times_length() {
    let m = plate();
    let mut p = MaterialParams::new(1.0, 0.3);
    p.tractions = vec![(TAG_TOP, [0.7, -1.3])];
    let f = assemble_load(&m, &p).unwrap();
    let sx: f64 = f.iter().step_by(2).sum();
    let sy: f64 = f.iter().skip(1).step_by(2).sum();
    assert!((sx - 0.7 * 2.0).abs() < 1e-12);
    assert!((sy + 1.3 * 2.0).abs() < 1e-12);
}

#[test]
fn patch_test_reproduces_linear_field() {
    let m = rectangle([0.0, 0.0], [1.0, 1.0], 4, 4);
    let k = AffineOperator::build(&m).unwrap().assemble(7e10, 0.27);
    let exact = field_of(&m, |x, y| [1e-3 + 2e-3 * x - 5e-4 * y, -3e-4 + 7e-4 * x + 1.5e-3 * y]);
    let boundary: Vec<usize> = m.nodes_with_tags(&[1, 2, 3, 4]);
    let constrained: Vec<usize> = boundary.iter().flat_map(|&v| [2 * v, 2 * v + 1]).collect();
    let values: Vec<f64> = constrained.iter().map(|&d| exact[d]).collect();
    let red = apply_dirichlet(&k, &vec![0.0; m.n_dofs()], &constrained, &values);
    let x = solve_spd(&red.matrix, &red.load).unwrap();
    let u = red.expand(&x);
    for (a, b) in u.iter().zip(&exact) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn random_spd_solve_meets_residual_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 50;
    let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut trips = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let mut v: f64 = (0..n).map(|k| b[k * n + i] * b[k * n + j]).sum();
            if i == j {
                v += 1.0;
            }
            trips.push((i, j, v));
        }
    }
    let a = CscMatrix::from_triplets(n, n, &trips);
    let f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let u = solve_spd(&a, &f).unwrap();
    let r: Vec<f64> = a.mul_vec(&u).iter().zip(&f).map(|(x, y)| x - y).collect();
    assert!(norm2(&r) <= 1e-10 * norm2(&f));
}

fn clamped_square_tip(n: usize) -> f64 {
    let m = rectangle([0.0, 0.0], [1.0, 1.0], n, n);
    let k = AffineOperator::build(&m).unwrap().assemble(2e11, 0.3);
    let f = body_load(&m, [0.0, -8000.0 * 9.81]);
    let constrained: Vec<usize> = m.nodes_with_tags(&[TAG_LEFT]).iter().flat_map(|&v| [2 * v, 2 * v + 1]).collect();
    let red = apply_dirichlet(&k, &f, &constrained, &vec![0.0; constrained.len()]);
    let u = red.expand(&solve_spd(&red.matrix, &red.load).unwrap());
    let tip = m.nodes.iter().position(|p| p[0] == 1.0 && p[1] == 1.0).unwrap();
    u[2 * tip + 1]
}

#[test]
fn clamped_square_converges_under_refinement() {
    let coarse = clamped_square_tip(8);
    let fine = clamped_square_tip(80);
    assert!(fine < 0.0);
    assert!(((coarse - fine) / fine).abs() < 0.05, "coarse {coarse} fine {fine}");
}

#[test]
fn unknown_traction_tag_is_an_error() {
    let m = plate();
    let mut p = MaterialParams::new(1.0, 0.3);
    p.tractions = vec![(99, [1.0, 0.0])];
    assert!(assemble_load(&m, &p).is_err());
    p.tractions = vec![(TAG_RIGHT, [1.0, 0.0])];
    assert!(assemble_load(&m, &p).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn affine_sum_equals_direct_assembly(e in 1e10f64..3e11, nu in 0.0f64..0.45) {
        let m = plate();
        let affine = AffineOperator::build(&m).unwrap().assemble(e, nu);
        let direct = assemble_direct(&m, e, nu).unwrap();
        prop_assert!(rel_diff(&affine, &direct) <= 1e-12);
    }

    #[test]
    fn energy_is_nonnegative(seed in any::<u64>(), nu in 0.0f64..0.49) {
        let m = plate();
        let k = AffineOperator::build(&m).unwrap().assemble(1.0, nu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..m.n_dofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
        prop_assert!(dot(&u, &k.mul_vec(&u)) >= 0.0);
    }

    #[test]
    fn lame_coefficients_are_positive(e in 1e-3f64..1e12, nu in 0.0f64..0.4999) {
        prop_assert!(theta_lambda(e, nu) >= 0.0);
        prop_assert!(theta_shear(e, nu) > 0.0);
    }

    #[test]
    fn load_is_linear_in_body_force(fx in -1e5f64..1e5, fy in -1e5f64..1e5) {
        let m = plate();
        let one = body_load(&m, [fx, fy]);
        let two = body_load(&m, [2.0 * fx, 2.0 * fy]);
        for (a, b) in one.iter().zip(&two) {
            prop_assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }
}
