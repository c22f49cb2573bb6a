//! P1 plane-strain elasticity.
//!
//! The stiffness is affine in two material coefficients,
//! `A(μ) = θ_λ(μ)·A_λ + θ_s(μ)·A_s`, with `θ_λ` the first Lamé parameter
//! and `θ_s` the shear modulus. Both terms are assembled once per mesh.

pub mod oracle;
pub mod vtk;

use serde::{Deserialize, Serialize};

use crate::linalg::{norm2, CscMatrix, SolveError, SpdFactor};
use crate::mesh::{Mesh, Point};
use crate::{Error, Result};

/// First Lamé parameter `Eν/((1+ν)(1−2ν))`.
pub fn theta_lambda(e: f64, nu: f64) -> f64 {
    e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
}

/// Shear modulus `E/(2(1+ν))`.
pub fn theta_shear(e: f64, nu: f64) -> f64 {
    e / (2.0 * (1.0 + nu))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    /// Force per unit volume.
    #[serde(default)]
    pub body_force: [f64; 2],
    /// Constant traction per boundary tag.
    #[serde(default)]
    pub tractions: Vec<(u32, [f64; 2])>,
}

impl MaterialParams {
    pub fn new(youngs_modulus: f64, poisson_ratio: f64) -> Self {
        Self {
            youngs_modulus,
            poisson_ratio,
            body_force: [0.0, 0.0],
            tractions: vec![],
        }
    }

    pub fn with_body_force(mut self, b: [f64; 2]) -> Self {
        self.body_force = b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_material(self.youngs_modulus, self.poisson_ratio)
    }

    pub fn coefficients(&self) -> [f64; 2] {
        [
            theta_lambda(self.youngs_modulus, self.poisson_ratio),
            theta_shear(self.youngs_modulus, self.poisson_ratio),
        ]
    }
}

pub fn check_material(e: f64, nu: f64) -> Result<()> {
    if !(e > 0.0 && e.is_finite()) {
        return Err(Error::Material(format!("Young's modulus must be positive, got {e}")));
    }
    if !(0.0..0.5).contains(&nu) {
        return Err(Error::Material(format!("Poisson ratio must lie in [0, 0.5), got {nu}")));
    }
    Ok(())
}

/// Shape-function gradients and area of a P1 triangle.
pub fn gradients(p: [Point; 3]) -> ([f64; 3], [f64; 3], f64) {
    let two_s = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let mut b = [0.0; 3];
    let mut c = [0.0; 3];
    for i in 0..3 {
        let j = (i + 1) % 3;
        let k = (i + 2) % 3;
        b[i] = (p[j][1] - p[k][1]) / two_s;
        c[i] = (p[k][0] - p[j][0]) / two_s;
    }
    (b, c, 0.5 * two_s)
}

/// Strain–displacement matrix rows (εxx, εyy, γxy) over interleaved DoFs.
pub fn strain_matrix(b: &[f64; 3], c: &[f64; 3]) -> [[f64; 6]; 3] {
    let mut m = [[0.0; 6]; 3];
    for i in 0..3 {
        m[0][2 * i] = b[i];
        m[1][2 * i + 1] = c[i];
        m[2][2 * i] = c[i];
        m[2][2 * i + 1] = b[i];
    }
    m
}

/// The two unit element matrices `(A_λ^e, A_s^e)`.
pub fn element_terms(p: [Point; 3]) -> Result<([[f64; 6]; 6], [[f64; 6]; 6])> {
    let (b, c, area) = gradients(p);
    if !(area > 0.0) {
        return Err(crate::mesh::MeshError::DegenerateTriangle { index: usize::MAX }.into());
    }
    let bm = strain_matrix(&b, &c);
    let div: [f64; 6] = std::array::from_fn(|k| bm[0][k] + bm[1][k]);
    let weights = [2.0, 2.0, 1.0];
    let mut kl = [[0.0; 6]; 6];
    let mut ks = [[0.0; 6]; 6];
    for r in 0..6 {
        for s in 0..6 {
            kl[r][s] = area * div[r] * div[s];
            ks[r][s] = area * (0..3).map(|q| weights[q] * bm[q][r] * bm[q][s]).sum::<f64>();
        }
    }
    Ok((kl, ks))
}

fn element_dofs(t: [usize; 3]) -> [usize; 6] {
    [2 * t[0], 2 * t[0] + 1, 2 * t[1], 2 * t[1] + 1, 2 * t[2], 2 * t[2] + 1]
}

/// Affine stiffness `A(μ) = θ_λ A_λ + θ_s A_s`; both terms share one pattern.
#[derive(Debug, Clone)]
pub struct AffineOperator {
    pub lambda_term: CscMatrix,
    pub shear_term: CscMatrix,
}

impl AffineOperator {
    pub fn build(mesh: &Mesh) -> Result<Self> {
        let n = mesh.n_dofs();
        let mut tl = Vec::with_capacity(36 * mesh.triangles.len());
        let mut ts = Vec::with_capacity(36 * mesh.triangles.len());
        for (i, t) in mesh.triangles.iter().enumerate() {
            let (kl, ks) = element_terms(mesh.triangle_points(i)).map_err(|_| {
                Error::from(crate::mesh::MeshError::DegenerateTriangle { index: i })
            })?;
            let dofs = element_dofs(t.nodes);
            for r in 0..6 {
                for s in 0..6 {
                    tl.push((dofs[r], dofs[s], kl[r][s]));
                    ts.push((dofs[r], dofs[s], ks[r][s]));
                }
            }
        }
        let lambda_term = CscMatrix::from_triplets(n, n, &tl);
        let shear_term = CscMatrix::from_triplets(n, n, &ts);
        debug_assert_eq!(lambda_term.col_ptr(), shear_term.col_ptr());
        Ok(Self {
            lambda_term,
            shear_term,
        })
    }

    pub fn n_dofs(&self) -> usize {
        self.lambda_term.nrows()
    }

    pub fn terms(&self) -> [&CscMatrix; 2] {
        [&self.lambda_term, &self.shear_term]
    }

    pub fn coefficients(e: f64, nu: f64) -> [f64; 2] {
        [theta_lambda(e, nu), theta_shear(e, nu)]
    }

    pub fn assemble(&self, e: f64, nu: f64) -> CscMatrix {
        let [cl, cs] = Self::coefficients(e, nu);
        CscMatrix::linear_combination(&[(cl, &self.lambda_term), (cs, &self.shear_term)])
    }

    /// `y = A(μ) x`
    pub fn apply(&self, e: f64, nu: f64, x: &[f64]) -> Vec<f64> {
        let [cl, cs] = Self::coefficients(e, nu);
        let mut y = vec![0.0; x.len()];
        self.lambda_term.mul_vec_acc(cl, x, &mut y);
        self.shear_term.mul_vec_acc(cs, x, &mut y);
        y
    }
}

/// Direct assembly with the full plane-strain constitutive matrix, without
/// the affine split.
pub fn assemble_direct(mesh: &Mesh, e: f64, nu: f64) -> Result<CscMatrix> {
    let lam = theta_lambda(e, nu);
    let mu = theta_shear(e, nu);
    let d = [
        [lam + 2.0 * mu, lam, 0.0],
        [lam, lam + 2.0 * mu, 0.0],
        [0.0, 0.0, mu],
    ];
    let n = mesh.n_dofs();
    let mut trips = Vec::with_capacity(36 * mesh.triangles.len());
    for (i, t) in mesh.triangles.iter().enumerate() {
        let (b, c, area) = gradients(mesh.triangle_points(i));
        if !(area > 0.0) {
            return Err(crate::mesh::MeshError::DegenerateTriangle { index: i }.into());
        }
        let bm = strain_matrix(&b, &c);
        let dofs = element_dofs(t.nodes);
        for r in 0..6 {
            for s in 0..6 {
                let mut v = 0.0;
                for p in 0..3 {
                    for q in 0..3 {
                        v += bm[p][r] * d[p][q] * bm[q][s];
                    }
                }
                trips.push((dofs[r], dofs[s], area * v));
            }
        }
    }
    Ok(CscMatrix::from_triplets(n, n, &trips))
}

/// Consistent P1 load of a constant body force.
pub fn body_load(mesh: &Mesh, force: [f64; 2]) -> Vec<f64> {
    let mut f = vec![0.0; mesh.n_dofs()];
    if force == [0.0, 0.0] {
        return f;
    }
    for (i, t) in mesh.triangles.iter().enumerate() {
        let p = mesh.triangle_points(i);
        let area = crate::mesh::signed_area(p[0], p[1], p[2]);
        for &v in &t.nodes {
            f[2 * v] += force[0] * area / 3.0;
            f[2 * v + 1] += force[1] * area / 3.0;
        }
    }
    f
}

/// Body force plus edge tractions (two-point Gauss rule per edge).
pub fn assemble_load(mesh: &Mesh, params: &MaterialParams) -> Result<Vec<f64>> {
    let mut f = body_load(mesh, params.body_force);
    let tags = mesh.boundary_tags();
    let g = 0.5 / 3f64.sqrt();
    let gauss = [0.5 - g, 0.5 + g];
    for &(tag, t) in &params.tractions {
        if !tags.contains(&tag) {
            return Err(Error::UnknownTag(tag));
        }
        for e in mesh.boundary_edges.iter().filter(|e| e.tag == tag) {
            let [a, b] = e.nodes;
            let len = crate::mesh::distance(mesh.nodes[a], mesh.nodes[b]);
            for &s in &gauss {
                let w = 0.5 * len;
                for (node, phi) in [(a, 1.0 - s), (b, s)] {
                    f[2 * node] += w * phi * t[0];
                    f[2 * node + 1] += w * phi * t[1];
                }
            }
        }
    }
    Ok(f)
}

/// System left after eliminating prescribed DoFs.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub matrix: CscMatrix,
    pub load: Vec<f64>,
    pub free: Vec<usize>,
    pub constrained: Vec<usize>,
    pub values: Vec<f64>,
    pub full_len: usize,
}

impl ReducedSystem {
    /// Scatters a reduced solution back to full length.
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.full_len];
        for (k, &d) in self.free.iter().enumerate() {
            u[d] = x[k];
        }
        for (k, &d) in self.constrained.iter().enumerate() {
            u[d] = self.values[k];
        }
        u
    }
}

/// Symmetric elimination of `constrained` DoFs fixed to `values`.
pub fn apply_dirichlet(matrix: &CscMatrix, load: &[f64], constrained: &[usize], values: &[f64]) -> ReducedSystem {
    assert_eq!(constrained.len(), values.len());
    let n = matrix.nrows();
    let mut mask = vec![false; n];
    let mut order: Vec<usize> = (0..constrained.len()).collect();
    order.sort_by_key(|&k| constrained[k]);
    order.dedup_by_key(|k| constrained[*k]);
    let cons: Vec<usize> = order.iter().map(|&k| constrained[k]).collect();
    let vals: Vec<f64> = order.iter().map(|&k| values[k]).collect();
    for &d in &cons {
        mask[d] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&d| !mask[d]).collect();
    let mut g = vec![0.0; n];
    for (k, &d) in cons.iter().enumerate() {
        g[d] = vals[k];
    }
    let kg = matrix.mul_vec(&g);
    let reduced = matrix.submatrix(&free, &free);
    let rhs: Vec<f64> = free.iter().map(|&d| load[d] - kg[d]).collect();
    ReducedSystem {
        matrix: reduced,
        load: rhs,
        free,
        constrained: cons,
        values: vals,
        full_len: n,
    }
}

/// Sparse Cholesky solve with a relative residual contract of 1e-10.
pub fn solve_spd(matrix: &CscMatrix, load: &[f64]) -> std::result::Result<Vec<f64>, SolveError> {
    if matrix.nrows() != load.len() || matrix.nrows() != matrix.ncols() {
        return Err(SolveError::Dimension {
            rows: matrix.nrows(),
            cols: matrix.ncols(),
            rhs: load.len(),
        });
    }
    let factor = SpdFactor::new(matrix)?;
    solve_with_factor(&factor, matrix, load)
}

/// Solves with an existing factorization plus up to three refinement steps.
pub fn solve_with_factor(factor: &SpdFactor, matrix: &CscMatrix, load: &[f64]) -> std::result::Result<Vec<f64>, SolveError> {
    let fnorm = norm2(load);
    if fnorm == 0.0 {
        return Ok(vec![0.0; load.len()]);
    }
    let mut x = factor.solve(load);
    let mut rel = f64::INFINITY;
    for _ in 0..4 {
        let ax = matrix.mul_vec(&x);
        let r: Vec<f64> = load.iter().zip(&ax).map(|(f, a)| f - a).collect();
        rel = norm2(&r) / fnorm;
        if rel <= 1e-10 {
            return Ok(x);
        }
        let dx = factor.solve(&r);
        x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
    }
    if !x.iter().all(|v| v.is_finite()) || rel > 1e-10 {
        return Err(SolveError::Singular {
            reason: format!("relative residual {rel:.3e} after refinement"),
        });
    }
    Ok(x)
}

/// Per-triangle von Mises stress with plane-strain `σzz = ν(σxx + σyy)`.
/// `material(region)` returns `(E, ν)`.
pub fn von_mises_with(mesh: &Mesh, field: &[f64], material: impl Fn(u32) -> (f64, f64)) -> Vec<f64> {
    assert_eq!(field.len(), mesh.n_dofs(), "field length does not match the mesh");
    mesh.triangles
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (e, nu) = material(t.region);
            let lam = theta_lambda(e, nu);
            let mu = theta_shear(e, nu);
            let (b, c, _) = gradients(mesh.triangle_points(i));
            let mut exx = 0.0;
            let mut eyy = 0.0;
            let mut gxy = 0.0;
            for k in 0..3 {
                let ux = field[2 * t.nodes[k]];
                let uy = field[2 * t.nodes[k] + 1];
                exx += b[k] * ux;
                eyy += c[k] * uy;
                gxy += c[k] * ux + b[k] * uy;
            }
            let sxx = (lam + 2.0 * mu) * exx + lam * eyy;
            let syy = lam * exx + (lam + 2.0 * mu) * eyy;
            let szz = nu * (sxx + syy);
            let txy = mu * gxy;
            let d = (sxx - syy).powi(2) + (syy - szz).powi(2) + (szz - sxx).powi(2);
            (0.5 * d + 3.0 * txy * txy).sqrt()
        })
        .collect()
}

pub fn von_mises(mesh: &Mesh, field: &[f64], params: &MaterialParams) -> Vec<f64> {
    von_mises_with(mesh, field, |_| (params.youngs_modulus, params.poisson_ratio))
}

/// Two translations and the linearised rotation about the origin.
pub fn rigid_body_modes(mesh: &Mesh) -> [Vec<f64>; 3] {
    let n = mesh.n_dofs();
    let mut tx = vec![0.0; n];
    let mut ty = vec![0.0; n];
    let mut rot = vec![0.0; n];
    for (v, p) in mesh.nodes.iter().enumerate() {
        tx[2 * v] = 1.0;
        ty[2 * v + 1] = 1.0;
        rot[2 * v] = -p[1];
        rot[2 * v + 1] = p[0];
    }
    [tx, ty, rot]
}

/// Interleaved DoFs of a node list.
pub fn node_dofs(nodes: &[usize]) -> Vec<usize> {
    nodes.iter().flat_map(|&v| [2 * v, 2 * v + 1]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes::rectangle;

    #[test]
    fn zero_modulus_gives_zero_matrix() {
        let m = rectangle([0.0, 0.0], [1.0, 1.0], 2, 2);
        let op = AffineOperator::build(&m).unwrap();
        assert_eq!(op.assemble(0.0, 0.3).max_abs(), 0.0);
    }

    #[test]
    fn identity_solve_returns_load() {
        let a = CscMatrix::identity(3);
        let x = solve_spd(&a, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(x, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn two_by_two_closed_form() {
        let a = CscMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)]);
        let x = solve_spd(&a, &[1.0, 1.0]).unwrap();
        assert!((x[0] - 1.0 / 3.0).abs() < 1e-15 && (x[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_system_without_constraints() {
        let a = CscMatrix::from_triplets(1, 1, &[(0, 0, 4.0)]);
        let r = apply_dirichlet(&a, &[2.0], &[], &[]);
        let x = solve_spd(&r.matrix, &r.load).unwrap();
        assert_eq!(r.expand(&x), vec![0.5]);
    }

    #[test]
    fn all_constrained_is_empty() {
        let m = rectangle([0.0, 0.0], [1.0, 1.0], 1, 1);
        let k = AffineOperator::build(&m).unwrap().assemble(1.0, 0.3);
        let dofs: Vec<usize> = (0..8).collect();
        let r = apply_dirichlet(&k, &[1.0; 8], &dofs, &[0.0; 8]);
        assert_eq!(r.matrix.nrows(), 0);
        assert_eq!(r.expand(&[]), vec![0.0; 8]);
    }

    #[test]
    fn traction_on_unknown_tag_fails() {
        let m = rectangle([0.0, 0.0], [1.0, 1.0], 1, 1);
        let mut p = MaterialParams::new(1.0, 0.3);
        p.tractions.push((99, [1.0, 0.0]));
        assert!(matches!(assemble_load(&m, &p), Err(Error::UnknownTag(99))));
    }
}
