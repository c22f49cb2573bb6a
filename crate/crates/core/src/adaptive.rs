//! Rotational components behind an adaptive port.
//!
//! A rotational component is its pre-meshed main body plus a buffer layer
//! generated for the current angle between the stationary neighbour's port
//! and the rotated body's port. Bubble DoFs split into the body interior `m`
//! (factorized offline, in the body frame) and the body–buffer interface `b`.
//! With `A = R·A_mm·Rᵀ`, `B = A_mb`, `D = A_bb` the coupled system is solved
//! through the block-inversion identity
//!
//! ```text
//! E = A⁻¹B          (N_m × N_b)
//! F = (D − BᵀE)⁻¹   (N_b × N_b, "SchurF")
//! G = E·F,  H = G·Eᵀ
//! [A B; Bᵀ D]⁻¹ = [A⁻¹ + H, −G; −Gᵀ, F]
//! ```
//!
//! so that only `N_b` + (modes) + 1 solves with the offline factor are needed
//! per angle and material, and `A_mm` is never refactorized.

use std::cell::Cell;
use std::time::Instant;

use faer::{Mat, MatRef};

use crate::archetype::Archetype;
use crate::fem::{body_load, node_dofs, AffineOperator};
use crate::linalg::{CscMatrix, DenseSpd, SpdFactor};
use crate::mesh::{generate_buffer, placed_port_points, BufferKind, BufferSpec, Mesh, Placement, Point, PortGeometry};
use crate::{Error, Result};

/// Block-diagonal rotation of interleaved `(u_x, u_y)` pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationOperator {
    pub theta: f64,
    c: f64,
    s: f64,
}

impl RotationOperator {
    pub fn new(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self { theta, c, s }
    }

    pub fn is_identity(&self) -> bool {
        self.theta == 0.0
    }

    /// `v ← R v`
    pub fn apply(&self, v: &mut [f64]) {
        assert!(v.len() % 2 == 0, "rotation needs interleaved pairs");
        if self.is_identity() {
            return;
        }
        for p in v.chunks_exact_mut(2) {
            let (x, y) = (p[0], p[1]);
            p[0] = self.c * x - self.s * y;
            p[1] = self.s * x + self.c * y;
        }
    }

    /// `v ← Rᵀ v`
    pub fn apply_transpose(&self, v: &mut [f64]) {
        RotationOperator::new(-self.theta).apply(v)
    }

    pub fn rotated(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        self.apply(&mut out);
        out
    }

    /// Rotates every column of `m`.
    pub fn apply_columns(&self, m: &mut Mat<f64>) {
        if self.is_identity() {
            return;
        }
        for j in 0..m.ncols() {
            for i in (0..m.nrows()).step_by(2) {
                let (x, y) = (m[(i, j)], m[(i + 1, j)]);
                m[(i, j)] = self.c * x - self.s * y;
                m[(i + 1, j)] = self.s * x + self.c * y;
            }
        }
    }

    /// Explicit sparse `R` of dimension `n` (even).
    pub fn matrix(&self, n: usize) -> CscMatrix {
        let mut trips = Vec::with_capacity(2 * n);
        for p in (0..n).step_by(2) {
            trips.push((p, p, self.c));
            trips.push((p + 1, p, self.s));
            trips.push((p, p + 1, -self.s));
            trips.push((p + 1, p + 1, self.c));
        }
        CscMatrix::from_triplets(n, n, &trips)
    }

    /// `R K Rᵀ` for a matrix whose rows and columns are interleaved pairs.
    pub fn conjugate(&self, k: &CscMatrix) -> CscMatrix {
        if self.is_identity() {
            return k.clone();
        }
        let r = [[self.c, -self.s], [self.s, self.c]];
        let mut trips = Vec::with_capacity(4 * k.nnz());
        for col in 0..k.ncols() {
            let (cp, cc) = (col & !1, col & 1);
            for (row, v) in k.col(col) {
                let (rp, rc) = (row & !1, row & 1);
                for a in 0..2 {
                    for b in 0..2 {
                        trips.push((rp + a, cp + b, r[a][rc] * v * r[b][cc]));
                    }
                }
            }
        }
        CscMatrix::from_triplets(k.nrows(), k.ncols(), &trips)
    }
}

/// `(R·(s·A)·Rᵀ)⁻¹ = R·A⁻¹·Rᵀ / s` through an existing factorization of `A`.
pub struct ConjugatedFactor<'a> {
    pub factor: &'a SpdFactor,
    pub rotation: RotationOperator,
    pub scale: f64,
    solves: Cell<usize>,
}

impl<'a> ConjugatedFactor<'a> {
    pub fn new(factor: &'a SpdFactor, rotation: RotationOperator, scale: f64) -> Self {
        Self {
            factor,
            rotation,
            scale,
            solves: Cell::new(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.factor.dim()
    }

    /// Number of right-hand sides pushed through the factorization so far.
    pub fn solves(&self) -> usize {
        self.solves.get()
    }

    pub fn solve_in_place(&self, rhs: &mut Mat<f64>) {
        if rhs.ncols() == 0 || rhs.nrows() == 0 {
            return;
        }
        self.solves.set(self.solves.get() + rhs.ncols());
        RotationOperator::new(-self.rotation.theta).apply_columns(rhs);
        self.factor.solve_in_place(rhs.as_mut());
        self.rotation.apply_columns(rhs);
        let inv = 1.0 / self.scale;
        for j in 0..rhs.ncols() {
            for i in 0..rhs.nrows() {
                rhs[(i, j)] *= inv;
            }
        }
    }
}

/// Coupling and buffer blocks of a rotational component at one angle.
#[derive(Debug, Clone)]
pub struct CoupledBlocks {
    /// `A_mb`, `N_m × N_b`. `A_bm` is its transpose.
    pub a_mb: CscMatrix,
    /// `A_bb`, dense `N_b × N_b`.
    pub a_bb: Mat<f64>,
}

#[derive(Debug, Clone)]
pub struct SchurParts {
    /// `E = A⁻¹ A_mb`, `N_m × N_b`.
    pub e: Mat<f64>,
    schur: Mat<f64>,
}

impl SchurParts {
    /// `SchurF · y`.
    pub fn apply_schur_f(&self, y: MatRef<'_, f64>) -> Result<Mat<f64>> {
        let chol = DenseSpd::new(self.schur.as_ref(), 0.0)?;
        let mut out = y.to_owned();
        chol.solve_in_place(out.as_mut());
        Ok(out)
    }

    /// The Schur complement `A_bb − A_bm E` itself (before inversion).
    pub fn schur_complement(&self) -> &Mat<f64> {
        &self.schur
    }

    /// `G = E·SchurF`, formed explicitly.
    pub fn g(&self, schur_f: &DenseSpd) -> Mat<f64> {
        let mut gt = self.e.transpose().to_owned();
        schur_f.solve_in_place(gt.as_mut());
        gt.transpose().to_owned()
    }
}

/// Computes `E` and the factored Schur complement with `N_b` factorization
/// solves.
pub fn schur_parts(main: &ConjugatedFactor<'_>, blocks: &CoupledBlocks) -> Result<(SchurParts, DenseSpd)> {
    let n_b = blocks.a_bb.nrows();
    assert_eq!(main.dim(), blocks.a_mb.nrows());
    let mut e = blocks.a_mb.to_dense();
    main.solve_in_place(&mut e);
    let bte = blocks.a_mb.tr_mul_dense(e.as_ref());
    let mut schur = Mat::from_fn(n_b, n_b, |i, j| blocks.a_bb[(i, j)] - bte[(i, j)]);
    crate::linalg::symmetrize(&mut schur);
    let chol = DenseSpd::new(schur.as_ref(), 1e-13).map_err(|err| {
        Error::from(err).in_stage("buffer Schur complement (bad buffer mesh or missing constraints)")
    })?;
    Ok((SchurParts { e, schur }, chol))
}

/// Solution of the coupled system with the main-body rows kept factored.
///
/// Expanding `G = E·SchurF` in the identity gives
/// `x_b = SchurF·(r_b − Eᵀr_m)` and `x_m = A⁻¹r_m − E·x_b`; `A⁻¹r_m` is only
/// stored for the right-hand sides whose main-body part is nonzero.
#[derive(Debug, Clone)]
pub struct BlockSolution {
    /// Columns with a nonzero main-body right-hand side.
    pub active: Vec<usize>,
    /// `A⁻¹ r_m` of the active columns.
    pub y: Mat<f64>,
    /// `Eᵀ r_m` of the active columns.
    pub et_rm: Mat<f64>,
    /// Interface rows of every column.
    pub x_b: Mat<f64>,
}

impl BlockSolution {
    pub fn ncols(&self) -> usize {
        self.x_b.ncols()
    }

    /// Main-body rows and interface rows of `Σ_j c_j x_j`.
    pub fn combine(&self, e: &Mat<f64>, coeffs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(coeffs.len(), self.ncols());
        let n_b = self.x_b.nrows();
        let xb: Vec<f64> = (0..n_b)
            .map(|i| (0..coeffs.len()).map(|j| self.x_b[(i, j)] * coeffs[j]).sum())
            .collect();
        let mut xm: Vec<f64> = (0..e.nrows())
            .map(|i| -(0..n_b).map(|k| e[(i, k)] * xb[k]).sum::<f64>())
            .collect();
        for (c, &j) in self.active.iter().enumerate() {
            if coeffs[j] != 0.0 {
                for (i, v) in xm.iter_mut().enumerate() {
                    *v += coeffs[j] * self.y[(i, c)];
                }
            }
        }
        (xm, xb)
    }

    /// Every column in full, `N_m + N_b` rows.
    pub fn materialize(&self, e: &Mat<f64>) -> Mat<f64> {
        let n_m = e.nrows();
        let n_b = self.x_b.nrows();
        let k = self.ncols();
        let ex = e * &self.x_b;
        let mut x = Mat::<f64>::zeros(n_m + n_b, k);
        for j in 0..k {
            for i in 0..n_m {
                x[(i, j)] = -ex[(i, j)];
            }
            for i in 0..n_b {
                x[(n_m + i, j)] = self.x_b[(i, j)];
            }
        }
        for (c, &j) in self.active.iter().enumerate() {
            for i in 0..n_m {
                x[(i, j)] += self.y[(i, c)];
            }
        }
        x
    }

    /// `Xᵀ·rhs` for the right-hand side this solution was computed from.
    pub fn transpose_times_rhs(&self, rhs: MatRef<'_, f64>) -> Mat<f64> {
        let n_m = self.y.nrows();
        let n_b = self.x_b.nrows();
        let k = self.ncols();
        let r_m = rhs.subrows(0, n_m);
        let r_b = rhs.subrows(n_m, n_b);
        // X_bᵀ r_b over all columns
        let mut out = self.x_b.transpose() * r_b;
        // X_mᵀ r_m = Ŷᵀ r_m − X_bᵀ (Eᵀ r_m); r_m vanishes outside `active`
        let r_act = Mat::from_fn(n_m, self.active.len(), |i, c| r_m[(i, self.active[c])]);
        let yy = self.y.transpose() * &r_act;
        let xe = self.x_b.transpose() * &self.et_rm;
        for (c, &l) in self.active.iter().enumerate() {
            for kk in 0..k {
                out[(kk, l)] -= xe[(kk, c)];
            }
            for (c2, &kk) in self.active.iter().enumerate() {
                out[(kk, l)] += yy[(c2, c)];
            }
        }
        out
    }
}

/// Solves the coupled system for the columns of `rhs` (`N_m + N_b` rows),
/// keeping the main-body rows factored.
pub fn block_solve_factored(
    main: &ConjugatedFactor<'_>,
    parts: &SchurParts,
    schur_f: &DenseSpd,
    rhs: MatRef<'_, f64>,
) -> BlockSolution {
    let n_m = parts.e.nrows();
    let n_b = parts.e.ncols();
    let k = rhs.ncols();
    assert_eq!(rhs.nrows(), n_m + n_b);
    let r_m = rhs.subrows(0, n_m);
    let r_b = rhs.subrows(n_m, n_b);

    let active: Vec<usize> = (0..k).filter(|&j| (0..n_m).any(|i| r_m[(i, j)] != 0.0)).collect();
    let mut y = Mat::from_fn(n_m, active.len(), |i, c| r_m[(i, active[c])]);
    let et_rm = parts.e.transpose() * &y;
    main.solve_in_place(&mut y);

    let mut x_b = r_b.to_owned();
    for (c, &j) in active.iter().enumerate() {
        for i in 0..n_b {
            x_b[(i, j)] -= et_rm[(i, c)];
        }
    }
    schur_f.solve_in_place(x_b.as_mut());
    BlockSolution { active, y, et_rm, x_b }
}

/// Applies `[[A⁻¹ + G Eᵀ, −G], [−Gᵀ, SchurF]]` to the columns of `rhs`
/// (`N_m + N_b` rows).
pub fn block_solve(main: &ConjugatedFactor<'_>, parts: &SchurParts, schur_f: &DenseSpd, rhs: MatRef<'_, f64>) -> Mat<f64> {
    block_solve_factored(main, parts, schur_f, rhs).materialize(&parts.e)
}

/// Offline split of a rotational archetype into main body and adaptive
/// interface, with the main-body factorization at `E = 1`, `ν = ν₀`.
pub struct RotationalSplit {
    pub adaptive_port: usize,
    /// Arc center of the adaptive port in the body frame.
    pub center: Point,
    pub nu0: f64,
    pub m_dofs: Vec<usize>,
    pub b_dofs: Vec<usize>,
    pub a_mm: SpdFactor,
    pub k_mb: CscMatrix,
    pub k_bb: CscMatrix,
    /// Archetype mode columns of the body ports (all ports but the adaptive one).
    pub body_modes: Vec<usize>,
    /// `A(1, ν₀) Ψ` for the body-port extensions, `n × M_P`.
    pub ext_action: Mat<f64>,
    /// `Ψᵀ A(1, ν₀) Ψ` for the body-port extensions.
    pub ext_energy: Mat<f64>,
}

impl std::fmt::Debug for RotationalSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RotationalSplit")
            .field("adaptive_port", &self.adaptive_port)
            .field("nu0", &self.nu0)
            .field("n_main", &self.m_dofs.len())
            .field("n_interface", &self.b_dofs.len())
            .finish()
    }
}

impl RotationalSplit {
    pub fn build(arch: &Archetype, port: &str, nu0: f64) -> Result<Self> {
        let (adaptive_port, curve) = arch
            .mesh
            .port(port)
            .ok_or_else(|| Error::Config(format!("archetype '{}' has no port '{port}'", arch.id)))?;
        let center = match curve.geometry {
            PortGeometry::Arc { center, .. } => center,
            PortGeometry::Straight => {
                return Err(Error::Config(format!("adaptive port '{port}' must be a circular arc")));
            }
        };
        crate::fem::check_material(1.0, nu0)?;
        let m_dofs = arch.interior.clone();
        let b_dofs = node_dofs(&curve.nodes);
        if b_dofs.len() * 4 > m_dofs.len() {
            log::warn!(
                "archetype '{}': interface has {} DoFs against {} main-body DoFs; the buffer is not thin",
                arch.id,
                b_dofs.len(),
                m_dofs.len()
            );
        }
        let k = arch.operator.assemble(1.0, nu0);
        let a_mm = SpdFactor::new(&k.submatrix(&m_dofs, &m_dofs))?;
        let k_mb = k.submatrix(&m_dofs, &b_dofs);
        let k_bb = k.submatrix(&b_dofs, &b_dofs);
        let body_modes: Vec<usize> = (0..arch.mesh.ports.len())
            .filter(|&p| p != adaptive_port)
            .flat_map(|p| arch.mode_offsets[p]..arch.mode_offsets[p + 1])
            .collect();
        let n = arch.mesh.n_dofs();
        let psi = Mat::from_fn(n, body_modes.len(), |i, j| arch.extensions[(i, body_modes[j])]);
        let ext_action = k.mul_dense(psi.as_ref());
        let mut ext_energy = psi.transpose() * &ext_action;
        crate::linalg::symmetrize(&mut ext_energy);
        Ok(Self {
            adaptive_port,
            center,
            nu0,
            m_dofs,
            b_dofs,
            a_mm,
            k_mb,
            k_bb,
            body_modes,
            ext_action,
            ext_energy,
        })
    }

    pub fn n_main(&self) -> usize {
        self.m_dofs.len()
    }

    pub fn n_interface(&self) -> usize {
        self.b_dofs.len()
    }
}

/// Placed port of the stationary neighbour across an adaptive connection.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborPort {
    pub points: Vec<Point>,
    pub geometry: PortGeometry,
    pub closed: bool,
}

/// Port geometry after a rigid placement.
pub fn placed_geometry(geometry: PortGeometry, placement: &Placement) -> PortGeometry {
    match geometry {
        PortGeometry::Arc { center, radius } => PortGeometry::Arc {
            center: placement.apply(center),
            radius,
        },
        g => g,
    }
}

/// Buffer between a neighbour's placed port and the placed body port. Inner
/// nodes are the neighbour's port nodes in port order, outer nodes the body
/// port nodes in port order.
pub fn rotational_buffer(body_mesh: &Mesh, adaptive_port: usize, body: &Placement, neighbor: &NeighborPort) -> Result<Mesh> {
    let port = &body_mesh.ports[adaptive_port];
    if port.closed != neighbor.closed {
        return Err(Error::Config("adaptive port and its neighbour must both be closed or both open".into()));
    }
    let spec = BufferSpec {
        inner: neighbor.points.clone(),
        outer: placed_port_points(body_mesh, adaptive_port, body),
        kind: if port.closed { BufferKind::Annulus } else { BufferKind::Strip },
        inner_geometry: neighbor.geometry,
        outer_geometry: placed_geometry(port.geometry, body),
    };
    Ok(generate_buffer(&spec)?)
}

/// Online blocks at one angle: `A_mb = R K_mb Rᵀ`, `A_bb = R K_bb Rᵀ + K_buf[o, o]`.
pub fn assemble_coupled(split: &RotationalSplit, rotation: RotationOperator, e: f64, buffer_oo: MatRef<'_, f64>) -> CoupledBlocks {
    let mut a_mb = rotation.conjugate(&split.k_mb);
    a_mb.scale(e);
    let k_bb = rotation.conjugate(&split.k_bb).to_dense();
    let n_b = split.n_interface();
    let a_bb = Mat::from_fn(n_b, n_b, |i, j| e * k_bb[(i, j)] + buffer_oo[(i, j)]);
    CoupledBlocks { a_mb, a_bb }
}

/// Material and loading of a rotational component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationalMaterial {
    pub e: f64,
    pub nu: f64,
    /// `ρ g` in the global frame.
    pub body_force: [f64; 2],
}

/// Result of the online stage of one rotational component. The component
/// frame is the global frame; its modes are the adaptive-port modes
/// followed by the body-port modes.
#[derive(Debug, Clone)]
pub struct RotationalEvaluation {
    pub buffer: Mesh,
    pub body_placement: Placement,
    /// `a(φ_k, φ_l)` over all modes of the component.
    pub schur: Mat<f64>,
    /// `f(φ_k) − a(b^f, φ_k)`.
    pub load: Vec<f64>,
    /// Interior solutions over `m ∪ b`, global frame: one column per mode,
    /// then the force bubble.
    pub bubbles: BlockSolution,
    /// `E = A⁻¹ A_mb` at this angle, needed to expand the bubbles.
    pub e: Mat<f64>,
    /// Adaptive-port modes in the global frame over the buffer's inner DoFs.
    pub adaptive_modes: Mat<f64>,
    pub n_adaptive_modes: usize,
    pub factor_solves: usize,
    pub buffer_s: f64,
    pub bubble_s: f64,
}

/// FE-exact bubbles of a rotational component through the block identity.
pub fn online_bubbles(
    arch: &Archetype,
    split: &RotationalSplit,
    body: Placement,
    material: RotationalMaterial,
    neighbor: &NeighborPort,
    adaptive_modes: Mat<f64>,
) -> Result<RotationalEvaluation> {
    if (material.nu - split.nu0).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "rotational archetype '{}' was factorized at Poisson ratio {}; got {}",
            arch.id, split.nu0, material.nu
        )));
    }
    crate::fem::check_material(material.e, material.nu)?;
    let t0 = Instant::now();
    let buffer = rotational_buffer(&arch.mesh, split.adaptive_port, &body, neighbor)?;
    let buffer_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let n_a_nodes = buffer.ports[0].nodes.len();
    let a_dofs: Vec<usize> = (0..2 * n_a_nodes).collect();
    let o_dofs: Vec<usize> = (2 * n_a_nodes..buffer.n_dofs()).collect();
    assert_eq!(o_dofs.len(), split.n_interface());
    assert_eq!(adaptive_modes.nrows(), a_dofs.len());
    let k_buf = AffineOperator::build(&buffer)?.assemble(material.e, material.nu);
    let buf_oo = k_buf.submatrix(&o_dofs, &o_dofs).to_dense();
    let buf_oa = k_buf.submatrix(&o_dofs, &a_dofs);
    let buf_aa = k_buf.submatrix(&a_dofs, &a_dofs);
    let f_buf = body_load(&buffer, material.body_force);

    let rotation = RotationOperator::new(body.angle);
    let blocks = assemble_coupled(split, rotation, material.e, buf_oo.as_ref());
    let main = ConjugatedFactor::new(&split.a_mm, rotation, material.e);
    let (parts, schur_f) = schur_parts(&main, &blocks)?;

    let n_m = split.n_main();
    let n_b = split.n_interface();
    let m_a = adaptive_modes.ncols();
    let m_p = split.body_modes.len();
    let m_total = m_a + m_p;

    // right-hand sides: adaptive modes, body modes, force
    let mut rhs = Mat::<f64>::zeros(n_m + n_b, m_total + 1);
    let oa_w = buf_oa.mul_dense(adaptive_modes.as_ref());
    for k in 0..m_a {
        for i in 0..n_b {
            rhs[(n_m + i, k)] = -oa_w[(i, k)];
        }
    }
    let restrict_rotate = |v: &dyn Fn(usize) -> f64, dofs: &[usize]| -> Vec<f64> {
        let mut out: Vec<f64> = dofs.iter().map(|&d| v(d)).collect();
        rotation.apply(&mut out);
        out
    };
    for p in 0..m_p {
        let col = |d: usize| -material.e * split.ext_action[(d, p)];
        let rm = restrict_rotate(&col, &split.m_dofs);
        let rb = restrict_rotate(&col, &split.b_dofs);
        for i in 0..n_m {
            rhs[(i, m_a + p)] = rm[i];
        }
        for i in 0..n_b {
            rhs[(n_m + i, m_a + p)] = rb[i];
        }
    }
    let local_force = body.apply_vector_inverse(material.body_force);
    let f_loc = arch.force_load(local_force);
    {
        let col = |d: usize| f_loc[d];
        let rm = restrict_rotate(&col, &split.m_dofs);
        let rb = restrict_rotate(&col, &split.b_dofs);
        for i in 0..n_m {
            rhs[(i, m_total)] = rm[i];
        }
        for i in 0..n_b {
            rhs[(n_m + i, m_total)] = rb[i] + f_buf[o_dofs[i]];
        }
    }

    let bubbles = block_solve_factored(&main, &parts, &schur_f, rhs.as_ref());
    // Xᵀ·rhs over all columns; the last column is the force
    let xt_rhs = bubbles.transpose_times_rhs(rhs.as_ref());

    // a(φ_k, φ_l) = a(ψ_k, ψ_l) + Σ_I B_k (Aψ_l)_I with (Aψ_l)_I = −rhs_l
    let aa = buf_aa.mul_dense(adaptive_modes.as_ref());
    let mut schur = Mat::<f64>::zeros(m_total, m_total);
    for k in 0..m_a {
        for l in 0..m_a {
            schur[(k, l)] = (0..a_dofs.len()).map(|i| adaptive_modes[(i, k)] * aa[(i, l)]).sum();
        }
    }
    for k in 0..m_p {
        for l in 0..m_p {
            schur[(m_a + k, m_a + l)] = material.e * split.ext_energy[(k, l)];
        }
    }
    for k in 0..m_total {
        for l in 0..m_total {
            schur[(k, l)] -= xt_rhs[(k, l)];
        }
    }
    crate::linalg::symmetrize(&mut schur);

    // f(φ_k) = f(ψ_k) + f_Iᵀ B_k
    let mut load = vec![0.0; m_total];
    for k in 0..m_a {
        load[k] = (0..a_dofs.len()).map(|i| f_buf[a_dofs[i]] * adaptive_modes[(i, k)]).sum();
    }
    for p in 0..m_p {
        let col = split.body_modes[p];
        load[m_a + p] = (0..arch.mesh.n_dofs()).map(|i| f_loc[i] * arch.extensions[(i, col)]).sum();
    }
    for k in 0..m_total {
        load[k] += xt_rhs[(k, m_total)];
    }
    let bubble_s = t1.elapsed().as_secs_f64();

    Ok(RotationalEvaluation {
        buffer,
        body_placement: body,
        schur,
        load,
        bubbles,
        e: parts.e,
        adaptive_modes,
        n_adaptive_modes: m_a,
        factor_solves: main.solves(),
        buffer_s,
        bubble_s,
    })
}

impl RotationalEvaluation {
    /// Global-frame displacement of the buffer mesh and of the body mesh for
    /// local mode coefficients `coeffs` (adaptive modes first).
    pub fn reconstruct(&self, arch: &Archetype, split: &RotationalSplit, coeffs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m_a = self.n_adaptive_modes;
        let m_total = self.schur.nrows();
        assert_eq!(coeffs.len(), m_total);
        let n_m = split.n_main();
        let n_b = split.n_interface();

        let mut body_local = vec![0.0; arch.mesh.n_dofs()];
        for (p, &col) in split.body_modes.iter().enumerate() {
            let c = coeffs[m_a + p];
            if c != 0.0 {
                for (i, v) in body_local.iter_mut().enumerate() {
                    *v += c * arch.extensions[(i, col)];
                }
            }
        }
        let mut body = RotationOperator::new(self.body_placement.angle).rotated(&body_local);
        let mut all = coeffs.to_vec();
        all.push(1.0);
        let (xm, xb) = self.bubbles.combine(&self.e, &all);
        debug_assert_eq!((xm.len(), xb.len()), (n_m, n_b));
        for (k, &d) in split.m_dofs.iter().enumerate() {
            body[d] += xm[k];
        }
        for (k, &d) in split.b_dofs.iter().enumerate() {
            body[d] += xb[k];
        }

        let n_a = self.adaptive_modes.nrows();
        let mut buffer = vec![0.0; self.buffer.n_dofs()];
        for i in 0..n_a {
            buffer[i] = (0..m_a).map(|k| coeffs[k] * self.adaptive_modes[(i, k)]).sum();
        }
        for (k, &d) in split.b_dofs.iter().enumerate() {
            buffer[n_a + k] = body[d];
        }
        (buffer, body)
    }
}

impl Placement {
    /// `R(−angle) v`
    pub fn apply_vector_inverse(&self, v: Point) -> Point {
        crate::mesh::rotate_point(v, [0.0, 0.0], -self.angle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_round_trip() {
        let r = RotationOperator::new(0.7);
        let v = vec![1.0, 2.0, -3.0, 0.5];
        let mut w = v.clone();
        r.apply(&mut w);
        r.apply_transpose(&mut w);
        for (a, b) in v.iter().zip(&w) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn conjugate_matches_explicit_product() {
        let k = CscMatrix::from_triplets(4, 4, &[(0, 0, 2.0), (1, 0, 0.5), (0, 1, 0.5), (3, 2, 1.0), (2, 3, 1.0), (1, 1, 3.0)]);
        let r = RotationOperator::new(0.3);
        let rm = r.matrix(4).to_dense();
        let expected = &rm * k.to_dense() * rm.transpose();
        let got = r.conjugate(&k).to_dense();
        for i in 0..4 {
            for j in 0..4 {
                assert!((expected[(i, j)] - got[(i, j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scalar_block_identity() {
        // [[2,1],[1,2]] x = (1,1): E = 0.5, SchurF = 2/3, G = 1/3, x = (1/3, 1/3)
        let a = CscMatrix::from_triplets(1, 1, &[(0, 0, 2.0)]);
        let f = SpdFactor::new(&a).unwrap();
        let main = ConjugatedFactor::new(&f, RotationOperator::new(0.0), 1.0);
        let blocks = CoupledBlocks {
            a_mb: CscMatrix::from_triplets(1, 1, &[(0, 0, 1.0)]),
            a_bb: Mat::from_fn(1, 1, |_, _| 2.0),
        };
        let (parts, sf) = schur_parts(&main, &blocks).unwrap();
        assert!((parts.e[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((parts.g(&sf)[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        let inv_s = parts.apply_schur_f(Mat::from_fn(1, 1, |_, _| 1.0).as_ref()).unwrap();
        assert!((inv_s[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        let x = block_solve(&main, &parts, &sf, Mat::from_fn(2, 1, |_, _| 1.0).as_ref());
        assert!((x[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((x[(1, 0)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_main_block_is_dense_solve() {
        let a = CscMatrix::zeros(0, 0);
        let f = SpdFactor::new(&a).unwrap();
        let main = ConjugatedFactor::new(&f, RotationOperator::new(0.0), 1.0);
        let blocks = CoupledBlocks {
            a_mb: CscMatrix::zeros(0, 2),
            a_bb: Mat::from_fn(2, 2, |i, j| if i == j { 4.0 } else { 1.0 }),
        };
        let (parts, sf) = schur_parts(&main, &blocks).unwrap();
        let x = block_solve(&main, &parts, &sf, Mat::from_fn(2, 1, |i, _| [5.0, 5.0][i]).as_ref());
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14 && (x[(1, 0)] - 1.0).abs() < 1e-14);
    }
}
