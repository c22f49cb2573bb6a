//! Greedy reduced-basis spaces for bubble functions of stationary
//! components, and their online evaluation.
//!
//! One space is trained per (port, mode) extension and one per body-force
//! component. The online stage works only with matrices whose size is the
//! total reduced dimension; the only FE-sized operation is the final
//! expansion of a field.

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archetype::{Archetype, InteriorSolver};
use crate::fem::AffineOperator;
use crate::linalg::{dot, CscMatrix, DenseSpd};
use crate::{Error, Result};

/// What a reduced space approximates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    /// Bubble correcting the extension of global mode column `k`.
    Mode(usize),
    /// Bubble driven by a unit body force along axis `c` (0 = x, 1 = y).
    Force(usize),
}

impl Target {
    pub fn label(&self, arch: &Archetype) -> String {
        match *self {
            Target::Mode(k) => {
                let (p, j) = arch.mode_port(k);
                format!("{}_mode{}", arch.mesh.ports[p].name, j)
            }
            Target::Force(0) => "force_x".to_string(),
            Target::Force(_) => "force_y".to_string(),
        }
    }
}

/// All targets of an archetype: modes first, then the two force components.
pub fn targets(arch: &Archetype) -> Vec<Target> {
    (0..arch.n_modes()).map(Target::Mode).chain([Target::Force(0), Target::Force(1)]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub worst_e: f64,
    pub worst_nu: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyStatus {
    Converged,
    /// The basis cap was reached before the tolerance.
    MaxBasis,
    /// The next snapshot added nothing new (or every snapshot vanished).
    Exhausted,
}

#[derive(Debug, Clone)]
pub struct RbSpace {
    pub target: Target,
    /// Orthonormal columns over the archetype's interior DoFs.
    pub basis: Mat<f64>,
    /// `ζᵀ A_q,II ζ` for the two affine terms.
    pub reduced_terms: [Mat<f64>; 2],
    /// Mode targets: `ζᵀ (A_q ψ)_I` per term. Force targets: `ζᵀ f_I` once.
    pub reduced_rhs: Vec<Vec<f64>>,
    pub trace: Vec<TraceRow>,
    pub status: GreedyStatus,
}

impl RbSpace {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    fn reduced_matrix(&self, e: f64, nu: f64) -> Mat<f64> {
        let [cl, cs] = AffineOperator::coefficients(e, nu);
        let n = self.dim();
        Mat::from_fn(n, n, |i, j| cl * self.reduced_terms[0][(i, j)] + cs * self.reduced_terms[1][(i, j)])
    }

    fn reduced_load(&self, e: f64, nu: f64, body_force: [f64; 2]) -> Vec<f64> {
        match self.target {
            Target::Mode(_) => {
                let [cl, cs] = AffineOperator::coefficients(e, nu);
                self.reduced_rhs[0]
                    .iter()
                    .zip(&self.reduced_rhs[1])
                    .map(|(a, b)| -(cl * a + cs * b))
                    .collect()
            }
            Target::Force(c) => self.reduced_rhs[0].iter().map(|v| body_force[c] * v).collect(),
        }
    }

    /// Coefficients of the RB bubble at `μ`.
    pub fn coefficients(&self, e: f64, nu: f64, body_force: [f64; 2]) -> Result<Vec<f64>> {
        if self.dim() == 0 {
            return Ok(vec![]);
        }
        let a = self.reduced_matrix(e, nu);
        let f = self.reduced_load(e, nu, body_force);
        let chol = DenseSpd::new(a.as_ref(), 1e-14).map_err(|err| Error::ReducedNotSpd(format!("{:?}: {err}", self.target)))?;
        Ok(chol.solve_vec(&f))
    }

    /// Expands coefficients to interior DoFs.
    pub fn expand(&self, c: &[f64]) -> Vec<f64> {
        let n = self.basis.nrows();
        let mut out = vec![0.0; n];
        for (j, &cj) in c.iter().enumerate() {
            for i in 0..n {
                out[i] += self.basis[(i, j)] * cj;
            }
        }
        out
    }
}

/// RB bubble for a mode target, over interior DoFs.
pub fn rb_bubble(space: &RbSpace, e: f64, nu: f64) -> Result<Vec<f64>> {
    Ok(space.expand(&space.coefficients(e, nu, [0.0, 0.0])?))
}

/// RB bubble for a force target, over interior DoFs.
pub fn rb_force_bubble(space: &RbSpace, e: f64, nu: f64, body_force: [f64; 2]) -> Result<Vec<f64>> {
    Ok(space.expand(&space.coefficients(e, nu, body_force)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreedyOptions {
    pub tol: f64,
    pub n_max: usize,
    /// Training grid size `[n_E, n_ν]`.
    pub grid: [usize; 2],
}

impl Default for GreedyOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            n_max: 25,
            grid: [5, 5],
        }
    }
}

/// Truth bubble solver over a training set. `A_II(E, ν) = E·A_II(1, ν)`, so
/// one factorization per distinct ν serves every E.
pub struct TruthSolver<'a> {
    arch: &'a Archetype,
    xi: Vec<(f64, f64)>,
    nu_of: Vec<usize>,
    solvers: Vec<InteriorSolver>,
    terms: [CscMatrix; 2],
}

impl<'a> TruthSolver<'a> {
    pub fn new(arch: &'a Archetype, xi: &[(f64, f64)]) -> Result<Self> {
        if xi.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let mut nus: Vec<f64> = Vec::new();
        let mut nu_of = Vec::with_capacity(xi.len());
        for &(e, nu) in xi {
            crate::fem::check_material(e, nu)?;
            let idx = match nus.iter().position(|&v| v == nu) {
                Some(i) => i,
                None => {
                    nus.push(nu);
                    nus.len() - 1
                }
            };
            nu_of.push(idx);
        }
        let solvers = nus
            .par_iter()
            .map(|&nu| arch.interior_solver(1.0, nu))
            .collect::<Result<Vec<_>>>()?;
        let terms = [
            arch.operator.lambda_term.submatrix(&arch.interior, &arch.interior),
            arch.operator.shear_term.submatrix(&arch.interior, &arch.interior),
        ];
        Ok(Self {
            arch,
            xi: xi.to_vec(),
            nu_of,
            solvers,
            terms,
        })
    }

    pub fn training_set(&self) -> &[(f64, f64)] {
        &self.xi
    }

    /// Interior right-hand side of a target at `μ` with unit body force.
    fn rhs(&self, target: Target, e: f64, nu: f64) -> Vec<f64> {
        match target {
            Target::Mode(k) => {
                let r = self.arch.operator.apply(e, nu, &self.arch.extension(k));
                self.arch.interior.iter().map(|&d| -r[d]).collect()
            }
            Target::Force(c) => self.arch.restrict(&self.arch.unit_loads[c]),
        }
    }

    /// Truth bubbles of one target at every training point.
    pub fn snapshots(&self, target: Target) -> Vec<Vec<f64>> {
        let n = self.arch.interior.len();
        let mut out = vec![Vec::new(); self.xi.len()];
        for (s, solver) in self.solvers.iter().enumerate() {
            let members: Vec<usize> = (0..self.xi.len()).filter(|&k| self.nu_of[k] == s).collect();
            let mut rhs = Mat::<f64>::zeros(n, members.len());
            for (c, &k) in members.iter().enumerate() {
                let (e, nu) = self.xi[k];
                let r = self.rhs(target, e, nu);
                for i in 0..n {
                    rhs[(i, c)] = r[i];
                }
            }
            solver.solve_many(&mut rhs);
            for (c, &k) in members.iter().enumerate() {
                let e = self.xi[k].0;
                out[k] = (0..n).map(|i| rhs[(i, c)] / e).collect();
            }
        }
        out
    }

    fn energy(&self, e: f64, nu: f64, v: &[f64]) -> f64 {
        let [cl, cs] = AffineOperator::coefficients(e, nu);
        let mut y = vec![0.0; v.len()];
        self.terms[0].mul_vec_acc(cl, v, &mut y);
        self.terms[1].mul_vec_acc(cs, v, &mut y);
        dot(v, &y).max(0.0).sqrt()
    }
}

fn reduced_data(arch: &Archetype, target: Target, basis: &Mat<f64>, terms: &[CscMatrix; 2]) -> ([Mat<f64>; 2], Vec<Vec<f64>>) {
    let reduced_terms = [0, 1].map(|q| {
        let ab = terms[q].mul_dense(basis.as_ref());
        basis.transpose() * &ab
    });
    let project = |v: &[f64]| -> Vec<f64> {
        (0..basis.ncols())
            .map(|j| (0..basis.nrows()).map(|i| basis[(i, j)] * v[i]).sum())
            .collect()
    };
    let reduced_rhs = match target {
        Target::Mode(k) => {
            let psi = arch.extension(k);
            [&arch.operator.lambda_term, &arch.operator.shear_term]
                .iter()
                .map(|a| project(&arch.restrict(&a.mul_vec(&psi))))
                .collect()
        }
        Target::Force(c) => vec![project(&arch.restrict(&arch.unit_loads[c]))],
    };
    (reduced_terms, reduced_rhs)
}

/// Greedy training of one target against precomputed truth solves.
pub fn greedy_with(truth: &TruthSolver<'_>, target: Target, tol: f64, n_max: usize) -> Result<RbSpace> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("greedy tolerance must be positive, got {tol}")));
    }
    let arch = truth.arch;
    let n = arch.interior.len();
    let xi = truth.training_set();
    let snaps = truth.snapshots(target);
    let norms: Vec<f64> = xi.iter().zip(&snaps).map(|(&(e, nu), s)| truth.energy(e, nu, s)).collect();

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut trace = Vec::new();
    let mut status = GreedyStatus::Exhausted;

    let add = |columns: &mut Vec<Vec<f64>>, v: &[f64]| -> bool {
        let mut w = v.to_vec();
        let before = crate::linalg::norm2(&w);
        if before == 0.0 {
            return false;
        }
        for _ in 0..2 {
            for c in columns.iter() {
                let d = dot(c, &w);
                w.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
        }
        let after = crate::linalg::norm2(&w);
        if after <= 1e-10 * before {
            return false;
        }
        w.iter_mut().for_each(|a| *a /= after);
        columns.push(w);
        true
    };

    if let Some(first) = (0..xi.len()).find(|&k| norms[k] > 0.0) {
        add(&mut columns, &snaps[first]);
        loop {
            let basis = crate::linalg::mat_from_columns(n, &columns);
            let (terms, rhs) = reduced_data(arch, target, &basis, &truth.terms);
            let space = RbSpace {
                target,
                basis,
                reduced_terms: terms,
                reduced_rhs: rhs,
                trace: vec![],
                status,
            };
            let errors: Vec<f64> = xi
                .iter()
                .enumerate()
                .map(|(k, &(e, nu))| {
                    if norms[k] == 0.0 {
                        return Ok(0.0);
                    }
                    let approx = space.expand(&space.coefficients(e, nu, [1.0, 1.0])?);
                    let diff: Vec<f64> = snaps[k].iter().zip(&approx).map(|(a, b)| a - b).collect();
                    Ok(truth.energy(e, nu, &diff) / norms[k])
                })
                .collect::<Result<_>>()?;
            let worst = (0..errors.len()).fold(0, |w, k| if errors[k] > errors[w] { k } else { w });
            trace.push(TraceRow {
                iteration: columns.len(),
                worst_e: xi[worst].0,
                worst_nu: xi[worst].1,
                error: errors[worst],
            });
            if errors[worst] <= tol {
                status = GreedyStatus::Converged;
                break;
            }
            if columns.len() >= n_max {
                status = GreedyStatus::MaxBasis;
                log::warn!(
                    "{} / {}: basis cap {n_max} reached at error {:.3e}",
                    arch.id,
                    target.label(arch),
                    errors[worst]
                );
                break;
            }
            if !add(&mut columns, &snaps[worst]) {
                status = GreedyStatus::Exhausted;
                break;
            }
        }
    } else {
        trace.push(TraceRow {
            iteration: 0,
            worst_e: xi[0].0,
            worst_nu: xi[0].1,
            error: 0.0,
        });
    }
    let basis = crate::linalg::mat_from_columns(n, &columns);
    let (reduced_terms, reduced_rhs) = reduced_data(arch, target, &basis, &truth.terms);
    Ok(RbSpace {
        target,
        basis,
        reduced_terms,
        reduced_rhs,
        trace,
        status,
    })
}

pub fn greedy_train(arch: &Archetype, target: Target, xi: &[(f64, f64)], tol: f64, n_max: usize) -> Result<RbSpace> {
    let truth = TruthSolver::new(arch, xi)?;
    greedy_with(&truth, target, tol, n_max)
}

/// Trains every target of an archetype, in parallel over targets.
pub fn train_all(arch: &Archetype, opts: &GreedyOptions) -> Result<Vec<RbSpace>> {
    let xi = arch.domain.grid(opts.grid[0], opts.grid[1]);
    let truth = TruthSolver::new(arch, &xi)?;
    targets(arch)
        .par_iter()
        .map(|&t| greedy_with(&truth, t, opts.tol, opts.n_max))
        .collect()
}

/// Projection of the affine operator and loads onto
/// `V = [Ψ | ζ_1 | … | ζ_M | ζ_fx | ζ_fy]`, the space spanned by all
/// extensions and all bubble spaces of an archetype.
#[derive(Debug, Clone)]
pub struct ReducedModel {
    pub n_modes: usize,
    /// Offsets of each space's block inside `V`, in target order.
    pub offsets: Vec<usize>,
    pub gram: [Mat<f64>; 2],
    pub loads: [Vec<f64>; 2],
}

/// Online quantities of one stationary component at one `μ`.
#[derive(Debug, Clone)]
pub struct RbEvaluation {
    /// `a(φ_a, φ_b)` over the component's modes.
    pub schur: Mat<f64>,
    /// `f(φ_a) − a(b^f, φ_a)`.
    pub load: Vec<f64>,
    pub mode_coeffs: Vec<Vec<f64>>,
    pub force_coeffs: [Vec<f64>; 2],
}

impl ReducedModel {
    pub fn build(arch: &Archetype, spaces: &[RbSpace]) -> Result<Self> {
        let expected = targets(arch);
        if spaces.len() != expected.len() || spaces.iter().zip(&expected).any(|(s, t)| s.target != *t) {
            return Err(Error::MissingData(format!("archetype '{}' lacks a full set of RB spaces", arch.id)));
        }
        let m = arch.n_modes();
        let mut offsets = vec![m];
        for s in spaces {
            offsets.push(offsets.last().unwrap() + s.dim());
        }
        let d = *offsets.last().unwrap();
        let n = arch.mesh.n_dofs();
        let mut v = Mat::<f64>::zeros(n, d);
        for j in 0..m {
            for i in 0..n {
                v[(i, j)] = arch.extensions[(i, j)];
            }
        }
        for (s, space) in spaces.iter().enumerate() {
            for j in 0..space.dim() {
                for (k, &dof) in arch.interior.iter().enumerate() {
                    v[(dof, offsets[s] + j)] = space.basis[(k, j)];
                }
            }
        }
        let gram = [&arch.operator.lambda_term, &arch.operator.shear_term].map(|a| {
            let av = a.mul_dense(v.as_ref());
            let mut g = v.transpose() * &av;
            crate::linalg::symmetrize(&mut g);
            g
        });
        let loads = [0, 1].map(|c| {
            let f = &arch.unit_loads[c];
            (0..d).map(|j| (0..n).map(|i| v[(i, j)] * f[i]).sum()).collect()
        });
        Ok(Self {
            n_modes: m,
            offsets,
            gram,
            loads,
        })
    }

    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn block(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    fn solve_block(k: &Mat<f64>, range: std::ops::Range<usize>, rhs: &[f64]) -> Result<Vec<f64>> {
        if range.is_empty() {
            return Ok(vec![]);
        }
        let sub = k.as_ref().submatrix(range.start, range.start, range.len(), range.len());
        let chol = DenseSpd::new(sub, 1e-14).map_err(|e| Error::ReducedNotSpd(e.to_string()))?;
        Ok(chol.solve_vec(rhs))
    }

    /// Local Schur block and load of one component. Cost depends only on the
    /// reduced dimension.
    pub fn evaluate(&self, e: f64, nu: f64, body_force: [f64; 2]) -> Result<RbEvaluation> {
        let [cl, cs] = AffineOperator::coefficients(e, nu);
        let d = self.dim();
        let m = self.n_modes;
        let k = Mat::from_fn(d, d, |i, j| cl * self.gram[0][(i, j)] + cs * self.gram[1][(i, j)]);

        let mut mode_coeffs = Vec::with_capacity(m);
        for a in 0..m {
            let r = self.block(a);
            let rhs: Vec<f64> = r.clone().map(|i| -k[(i, a)]).collect();
            mode_coeffs.push(Self::solve_block(&k, r, &rhs)?);
        }
        let force_coeffs = [0, 1].map(|c| {
            let r = self.block(m + c);
            let rhs: Vec<f64> = r.clone().map(|i| body_force[c] * self.loads[c][i]).collect();
            Self::solve_block(&k, r, &rhs)
        });
        let [f0, f1] = force_coeffs;
        let force_coeffs = [f0?, f1?];

        // K·C, column a = K[:, a] + K[:, Z_a] c_a
        let mut kc = Mat::<f64>::zeros(d, m);
        for a in 0..m {
            let r = self.block(a);
            for i in 0..d {
                let mut v = k[(i, a)];
                for (t, j) in r.clone().enumerate() {
                    v += k[(i, j)] * mode_coeffs[a][t];
                }
                kc[(i, a)] = v;
            }
        }
        let mut schur = Mat::<f64>::zeros(m, m);
        for b in 0..m {
            for a in 0..m {
                let mut v = kc[(a, b)];
                for (t, j) in self.block(a).enumerate() {
                    v += mode_coeffs[a][t] * kc[(j, b)];
                }
                schur[(a, b)] = v;
            }
        }
        crate::linalg::symmetrize(&mut schur);

        // F = Cᵀ h − Cᵀ K d
        let h: Vec<f64> = (0..d)
            .map(|i| body_force[0] * self.loads[0][i] + body_force[1] * self.loads[1][i])
            .collect();
        let mut dvec = vec![0.0; d];
        for c in 0..2 {
            for (t, j) in self.block(m + c).enumerate() {
                dvec[j] = force_coeffs[c][t];
            }
        }
        let kd: Vec<f64> = (0..d).map(|i| (0..d).map(|j| k[(i, j)] * dvec[j]).sum()).collect();
        let load = (0..m)
            .map(|a| {
                let mut v = h[a] - kd[a];
                for (t, j) in self.block(a).enumerate() {
                    v += mode_coeffs[a][t] * (h[j] - kd[j]);
                }
                v
            })
            .collect();
        Ok(RbEvaluation {
            schur,
            load,
            mode_coeffs,
            force_coeffs,
        })
    }

    /// Local field `b^f + Σ_a c_a (ψ_a + b_a)` on the archetype mesh.
    pub fn reconstruct(&self, arch: &Archetype, spaces: &[RbSpace], eval: &RbEvaluation, coeffs: &[f64]) -> Vec<f64> {
        let m = self.n_modes;
        let c = Mat::from_fn(m, 1, |a, _| coeffs[a]);
        let ext = &arch.extensions * &c;
        let mut u: Vec<f64> = (0..ext.nrows()).map(|i| ext[(i, 0)]).collect();
        let mut interior = Mat::<f64>::zeros(arch.interior.len(), 1);
        let mut add = |space: &RbSpace, c: &[f64], scale: f64| {
            if scale == 0.0 || c.is_empty() {
                return;
            }
            let w = Mat::from_fn(c.len(), 1, |j, _| scale * c[j]);
            interior += &space.basis * &w;
        };
        for a in 0..m {
            add(&spaces[a], &eval.mode_coeffs[a], coeffs[a]);
        }
        for c in 0..2 {
            add(&spaces[m + c], &eval.force_coeffs[c], 1.0);
        }
        for (k, &dof) in arch.interior.iter().enumerate() {
            u[dof] += interior[(k, 0)];
        }
        u
    }
}
