use std::f64::consts::PI;

use apcms_core::adaptive::{block_solve, block_solve_factored, schur_parts, ConjugatedFactor, CoupledBlocks, RotationOperator};
use apcms_core::fem::AffineOperator;
use apcms_core::linalg::{CscMatrix, SpdFactor};
use apcms_core::mesh::rotate_mesh;
use apcms_core::mesh::shapes::annulus;
use faer::Mat;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random sparse SPD matrix of size `n_m + n_b` split into its blocks.
fn random_coupled(rng: &mut ChaCha8Rng, n_m: usize, n_b: usize) -> (CscMatrix, CscMatrix, CoupledBlocks) {
    let n = n_m + n_b;
    let mut trips = Vec::new();
    let mut diag = vec![1.0; n];
    for _ in 0..4 * n {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let v: f64 = rng.random_range(-1.0..1.0);
        trips.push((i, j, v));
        trips.push((j, i, v));
        diag[i] += v.abs();
        diag[j] += v.abs();
    }
    for (i, d) in diag.iter().enumerate() {
        trips.push((i, i, d + rng.random_range(0.0..1.0)));
    }
    let full = CscMatrix::from_triplets(n, n, &trips);
    let m: Vec<usize> = (0..n_m).collect();
    let b: Vec<usize> = (n_m..n).collect();
    let a_mm = full.submatrix(&m, &m);
    let blocks = CoupledBlocks {
        a_mb: full.submatrix(&m, &b),
        a_bb: full.submatrix(&b, &b).to_dense(),
    };
    (full, a_mm, blocks)
}

fn rel_residual(a: &CscMatrix, x: &Mat<f64>, rhs: &Mat<f64>) -> f64 {
    let ax = a.mul_dense(x.as_ref());
    let mut worst = 0.0f64;
    for j in 0..rhs.ncols() {
        let r: f64 = (0..rhs.nrows()).map(|i| (ax[(i, j)] - rhs[(i, j)]).powi(2)).sum::<f64>().sqrt();
        let f: f64 = (0..rhs.nrows()).map(|i| rhs[(i, j)].powi(2)).sum::<f64>().sqrt();
        worst = worst.max(r / f);
    }
    worst
}

fn frobenius_rel(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            num += (a[(i, j)] - b[(i, j)]).powi(2);
            den += b[(i, j)].powi(2);
        }
    }
    (num / den).sqrt()
}

#[test]
fn random_blocks_match_direct_factorization() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (full, a_mm, blocks) = random_coupled(&mut rng, 150, 20);
    let f = SpdFactor::new(&a_mm).unwrap();
    let main = ConjugatedFactor::new(&f, RotationOperator::new(0.0), 1.0);
    let (parts, sf) = schur_parts(&main, &blocks).unwrap();
    assert_eq!((parts.e.nrows(), parts.e.ncols()), (150, 20));
    let rhs = Mat::from_fn(170, 3, |_, _| rng.random_range(-1.0..1.0));
    let x = block_solve(&main, &parts, &sf, rhs.as_ref());
    assert!(rel_residual(&full, &x, &rhs) <= 1e-9);

    let direct = SpdFactor::new(&full).unwrap();
    let mut y = rhs.clone();
    direct.solve_in_place(y.as_mut());
    assert!(frobenius_rel(&x, &y) <= 1e-9);
}

#[test]
fn schur_complement_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, a_mm, blocks) = random_coupled(&mut rng, 60, 12);
    let f = SpdFactor::new(&a_mm).unwrap();
    let main = ConjugatedFactor::new(&f, RotationOperator::new(0.4), 1.0);
    let (parts, _) = schur_parts(&main, &blocks).unwrap();
    let s = parts.schur_complement();
    for i in 0..s.nrows() {
        for j in 0..s.ncols() {
            assert!((s[(i, j)] - s[(j, i)]).abs() <= 1e-12 * s[(i, i)].abs().max(s[(j, j)].abs()));
        }
    }
}

#[test]
fn factored_solution_counts_solves_per_active_column() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n_m, n_b) = (80, 10);
    let (full, a_mm, blocks) = random_coupled(&mut rng, n_m, n_b);
    let f = SpdFactor::new(&a_mm).unwrap();
    let main = ConjugatedFactor::new(&f, RotationOperator::new(0.0), 1.0);
    let (parts, sf) = schur_parts(&main, &blocks).unwrap();
    let after_schur = main.solves();
    assert_eq!(after_schur, n_b);
    // two columns with main-body data, three with buffer data only
    let rhs = Mat::from_fn(n_m + n_b, 5, |i, j| if (j < 2) == (i < n_m) { rng.random_range(-1.0..1.0) } else { 0.0 });
    let sol = block_solve_factored(&main, &parts, &sf, rhs.as_ref());
    assert_eq!(main.solves() - after_schur, 2);
    let x = sol.materialize(&parts.e);
    assert!(rel_residual(&full, &x, &rhs) <= 1e-9);
    let coeffs = [0.5, -1.0, 2.0, 0.25, 1.5];
    let (xm, xb) = sol.combine(&parts.e, &coeffs);
    for i in 0..n_m + n_b {
        let expected: f64 = (0..5).map(|j| coeffs[j] * x[(i, j)]).sum();
        let got = if i < n_m { xm[i] } else { xb[i - n_m] };
        assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }
}

#[test]
fn rotation_operator_is_orthogonal() {
    let r = RotationOperator::new(1.234).matrix(10).to_dense();
    let rrt = &r * r.transpose();
    for i in 0..10 {
        for j in 0..10 {
            assert!((rrt[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs() <= 1e-15);
        }
    }
    assert!(RotationOperator::new(0.0).is_identity());
}

#[test]
fn rotated_mesh_stiffness_is_conjugated_stiffness() {
    let m = annulus(0.4, 1.0, 20, 3, "in", "out");
    let k = AffineOperator::build(&m).unwrap().assemble(2e11, 0.3);
    for deg in [15.0f64, 90.0, 137.0] {
        let theta = deg.to_radians();
        let rotated = AffineOperator::build(&rotate_mesh(&m, [0.0, 0.0], theta)).unwrap().assemble(2e11, 0.3);
        let conj = RotationOperator::new(theta).conjugate(&k);
        let err = frobenius_rel(&rotated.to_dense(), &conj.to_dense());
        assert!(err <= 1e-10, "{deg}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn block_identity_matches_direct_solve(seed in any::<u64>(), n_m in 1usize..200, n_b in 1usize..30, deg in -180.0f64..180.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_m = 2 * (n_m / 2).max(1);
        let (_, a_mm, blocks) = random_coupled(&mut rng, n_m, n_b);
        let rot = RotationOperator::new(deg.to_radians());
        // the coupled system with the main block conjugated by the rotation
        let a_mm_rot = rot.conjugate(&a_mm);
        let b: Vec<usize> = (n_m..n_m + n_b).collect();
        let mut trips = Vec::new();
        for c in 0..n_m {
            for (r, v) in a_mm_rot.col(c) {
                trips.push((r, c, v));
            }
        }
        for c in 0..n_b {
            for (r, v) in blocks.a_mb.col(c) {
                trips.push((r, b[c], v));
                trips.push((b[c], r, v));
            }
            for r in 0..n_b {
                trips.push((b[r], b[c], blocks.a_bb[(r, c)]));
            }
        }
        let full = CscMatrix::from_triplets(n_m + n_b, n_m + n_b, &trips);
        let f = SpdFactor::new(&a_mm).unwrap();
        let main = ConjugatedFactor::new(&f, rot, 1.0);
        let (parts, sf) = schur_parts(&main, &blocks).unwrap();
        let rhs = Mat::from_fn(n_m + n_b, 2, |_, _| rng.random_range(-1.0..1.0));
        let x = block_solve(&main, &parts, &sf, rhs.as_ref());
        prop_assert!(rel_residual(&full, &x, &rhs) <= 1e-9);
    }

    #[test]
    fn conjugated_inverse_law(seed in any::<u64>(), deg in -180.0f64..180.0, scale in 0.5f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, a, _) = random_coupled(&mut rng, 40, 1);
        let rot = RotationOperator::new(deg * PI / 180.0);
        let f = SpdFactor::new(&a).unwrap();
        let cf = ConjugatedFactor::new(&f, rot, scale);
        let y = Mat::from_fn(40, 1, |_, _| rng.random_range(-1.0..1.0));
        let mut x = y.clone();
        cf.solve_in_place(&mut x);
        let mut op = rot.conjugate(&a);
        op.scale(scale);
        prop_assert!(rel_residual(&op, &x, &y) <= 1e-10);
    }

    #[test]
    fn rotation_round_trip(deg in -720.0f64..720.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = RotationOperator::new(deg.to_radians());
        let back = RotationOperator::new(-deg.to_radians()).rotated(&r.rotated(&v));
        for (a, b) in v.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }
}
