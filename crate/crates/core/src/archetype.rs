//! Offline per-archetype data: port modes, harmonic extensions and
//! finite-element bubble solves.

use faer::{Mat, MatRef, Side};
use serde::{Deserialize, Serialize};

use crate::fem::{body_load, node_dofs, AffineOperator};
use crate::linalg::{CscMatrix, SpdFactor};
use crate::mesh::{distance, Mesh};
use crate::{Error, Result};

/// How a port's trace space is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortModeKind {
    /// Every nodal DoF is a mode.
    Full,
    /// The lowest chain-Laplacian modes, per displacement component.
    Reduced(usize),
}

impl Serialize for PortModeKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PortModeKind::Full => s.serialize_str("full"),
            PortModeKind::Reduced(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for PortModeKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match &v {
            serde_json::Value::String(s) => s.parse().map_err(serde::de::Error::custom),
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|n| PortModeKind::Reduced(n as usize))
                .ok_or_else(|| serde::de::Error::custom("mode count must be a non-negative integer")),
            _ => Err(serde::de::Error::custom("expected \"full\" or a mode count")),
        }
    }
}

impl std::str::FromStr for PortModeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(PortModeKind::Full);
        }
        s.parse::<usize>()
            .map(PortModeKind::Reduced)
            .map_err(|_| format!("expected \"full\" or a mode count, got '{s}'"))
    }
}

impl std::fmt::Display for PortModeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PortModeKind::Full => write!(f, "full"),
            PortModeKind::Reduced(n) => write!(f, "{n}"),
        }
    }
}

/// Orthonormal basis of a port's trace space over interleaved port DoFs.
#[derive(Debug, Clone)]
pub struct PortSpace {
    pub modes: Mat<f64>,
    pub kind: PortModeKind,
}

impl PortSpace {
    pub fn count(&self) -> usize {
        self.modes.ncols()
    }

    pub fn port_dofs(&self) -> usize {
        self.modes.nrows()
    }
}

/// Arc-length weighted graph Laplacian of a node chain: Neumann ends for an
/// open chain, periodic for a closed one.
pub fn chain_laplacian(points: &[[f64; 2]], closed: bool) -> Mat<f64> {
    let n = points.len();
    let mut l = Mat::<f64>::zeros(n, n);
    let links = if closed { n } else { n - 1 };
    for k in 0..links {
        let a = k;
        let b = (k + 1) % n;
        let w = 1.0 / distance(points[a], points[b]);
        l[(a, a)] += w;
        l[(b, b)] += w;
        l[(a, b)] -= w;
        l[(b, a)] -= w;
    }
    l
}

/// Gram–Schmidt applied twice, in place.
pub fn orthonormalize_columns(m: &mut Mat<f64>) {
    let (rows, cols) = (m.nrows(), m.ncols());
    for j in 0..cols {
        for _ in 0..2 {
            for i in 0..j {
                let d: f64 = (0..rows).map(|r| m[(r, i)] * m[(r, j)]).sum();
                for r in 0..rows {
                    let v = m[(r, i)];
                    m[(r, j)] -= d * v;
                }
            }
        }
        let norm = (0..rows).map(|r| m[(r, j)] * m[(r, j)]).sum::<f64>().sqrt();
        for r in 0..rows {
            m[(r, j)] /= norm;
        }
    }
}

pub fn build_port_modes(mesh: &Mesh, port: usize, kind: PortModeKind) -> Result<PortSpace> {
    let curve = &mesh.ports[port];
    let n = curve.nodes.len();
    let dofs = 2 * n;
    match kind {
        PortModeKind::Full => Ok(PortSpace {
            modes: Mat::from_fn(dofs, dofs, |i, j| if i == j { 1.0 } else { 0.0 }),
            kind,
        }),
        PortModeKind::Reduced(count) => {
            if count > dofs {
                return Err(Error::ModeCount {
                    port: curve.name.clone(),
                    count,
                    dofs,
                });
            }
            if count % 2 != 0 {
                return Err(Error::Config(format!(
                    "port '{}': mode count {count} must be even so that both displacement components share the same modes",
                    curve.name
                )));
            }
            let lap = chain_laplacian(&mesh.port_points(port), curve.closed);
            let eig = lap
                .self_adjoint_eigen(Side::Lower)
                .map_err(|e| Error::Config(format!("port '{}' eigen-decomposition failed: {e:?}", curve.name)))?;
            let u = eig.U();
            let mut modes = Mat::<f64>::zeros(dofs, count);
            for c in 0..count {
                let scalar = c / 2;
                let comp = c % 2;
                for i in 0..n {
                    modes[(2 * i + comp, c)] = u[(i, scalar)];
                }
            }
            orthonormalize_columns(&mut modes);
            Ok(PortSpace { modes, kind })
        }
    }
}

/// Box of admissible material parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterDomain {
    pub e_min: f64,
    pub e_max: f64,
    pub nu_min: f64,
    pub nu_max: f64,
}

impl ParameterDomain {
    pub fn contains(&self, e: f64, nu: f64) -> bool {
        let tol = 1e-12;
        e >= self.e_min * (1.0 - tol) && e <= self.e_max * (1.0 + tol) && nu >= self.nu_min - tol && nu <= self.nu_max + tol
    }

    /// Tensor grid, log-spaced in E, uniform in ν, E varying fastest.
    pub fn grid(&self, n_e: usize, n_nu: usize) -> Vec<(f64, f64)> {
        let lin = |a: f64, b: f64, k: usize, n: usize| if n == 1 { a } else { a + (b - a) * k as f64 / (n - 1) as f64 };
        let mut out = Vec::with_capacity(n_e * n_nu);
        for j in 0..n_nu {
            let nu = lin(self.nu_min, self.nu_max, j, n_nu);
            for i in 0..n_e {
                let e = lin(self.e_min.ln(), self.e_max.ln(), i, n_e).exp();
                out.push((e, nu));
            }
        }
        out
    }
}

/// DoFs that are neither on a port nor on a clamped boundary.
pub fn interior_dofs(mesh: &Mesh, clamped_tags: &[u32]) -> Vec<usize> {
    let mut fixed = vec![false; mesh.n_nodes()];
    for p in &mesh.ports {
        for &v in &p.nodes {
            fixed[v] = true;
        }
    }
    for v in mesh.nodes_with_tags(clamped_tags) {
        fixed[v] = true;
    }
    let free: Vec<usize> = (0..mesh.n_nodes()).filter(|&v| !fixed[v]).collect();
    node_dofs(&free)
}

/// Scalar P1 Laplacian with unit conductivity.
pub fn scalar_laplacian(mesh: &Mesh) -> CscMatrix {
    let n = mesh.n_nodes();
    let mut trips = Vec::with_capacity(9 * mesh.triangles.len());
    for (i, t) in mesh.triangles.iter().enumerate() {
        let (b, c, area) = crate::fem::gradients(mesh.triangle_points(i));
        for r in 0..3 {
            for s in 0..3 {
                trips.push((t.nodes[r], t.nodes[s], area * (b[r] * b[s] + c[r] * c[s])));
            }
        }
    }
    CscMatrix::from_triplets(n, n, &trips)
}

/// Discrete harmonic liftings of every port mode, componentwise: Dirichlet
/// data is the mode on its own port and zero on all other ports and on
/// clamped nodes. Columns follow the port order, then mode order.
pub fn harmonic_extensions(mesh: &Mesh, spaces: &[PortSpace], clamped_tags: &[u32]) -> Result<Mat<f64>> {
    let n = mesh.n_nodes();
    let total: usize = spaces.iter().map(|s| s.count()).sum();
    let mut fixed = vec![false; n];
    for p in &mesh.ports {
        for &v in &p.nodes {
            fixed[v] = true;
        }
    }
    for v in mesh.nodes_with_tags(clamped_tags) {
        fixed[v] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&v| !fixed[v]).collect();
    let fixed_nodes: Vec<usize> = (0..n).filter(|&v| fixed[v]).collect();
    let mut pos_fixed = vec![usize::MAX; n];
    for (k, &v) in fixed_nodes.iter().enumerate() {
        pos_fixed[v] = k;
    }

    // Dirichlet data per column and component, over the fixed nodes.
    let mut data = Mat::<f64>::zeros(fixed_nodes.len(), 2 * total);
    let mut col = 0;
    for (p, space) in spaces.iter().enumerate() {
        for k in 0..space.count() {
            for (i, &v) in mesh.ports[p].nodes.iter().enumerate() {
                data[(pos_fixed[v], 2 * col)] = space.modes[(2 * i, k)];
                data[(pos_fixed[v], 2 * col + 1)] = space.modes[(2 * i + 1, k)];
            }
            col += 1;
        }
    }

    let mut ext = Mat::<f64>::zeros(2 * n, total);
    let mut col = 0;
    for (p, space) in spaces.iter().enumerate() {
        for k in 0..space.count() {
            for (i, &v) in mesh.ports[p].nodes.iter().enumerate() {
                ext[(2 * v, col)] = space.modes[(2 * i, k)];
                ext[(2 * v + 1, col)] = space.modes[(2 * i + 1, k)];
            }
            col += 1;
        }
    }
    if free.is_empty() || total == 0 {
        return Ok(ext);
    }
    let lap = scalar_laplacian(mesh);
    let l_ff = lap.submatrix(&free, &free);
    let l_fd = lap.submatrix(&free, &fixed_nodes);
    let factor = SpdFactor::new(&l_ff).map_err(|e| {
        Error::from(e).in_stage("harmonic extension (every archetype needs at least one port or clamped node)")
    })?;
    let mut rhs = l_fd.mul_dense(data.as_ref());
    for v in rhs.col_iter_mut() {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
    factor.solve_in_place(rhs.as_mut());
    for c in 0..total {
        for (k, &v) in free.iter().enumerate() {
            ext[(2 * v, c)] = rhs[(k, 2 * c)];
            ext[(2 * v + 1, c)] = rhs[(k, 2 * c + 1)];
        }
    }
    Ok(ext)
}

/// A reference component with its port spaces and extensions.
#[derive(Debug, Clone)]
pub struct Archetype {
    pub id: String,
    pub mesh: Mesh,
    pub operator: AffineOperator,
    pub domain: ParameterDomain,
    pub clamped_tags: Vec<u32>,
    pub port_spaces: Vec<PortSpace>,
    /// `mode_offsets[j]..mode_offsets[j+1]` are the columns of port `j`.
    pub mode_offsets: Vec<usize>,
    /// Harmonic extensions, one column per (port, mode).
    pub extensions: Mat<f64>,
    /// Bubble DoFs.
    pub interior: Vec<usize>,
    /// Loads of a unit body force in x and in y.
    pub unit_loads: [Vec<f64>; 2],
}

impl Archetype {
    pub fn build(id: &str, mesh: Mesh, domain: ParameterDomain, clamped_tags: Vec<u32>, kind: PortModeKind) -> Result<Self> {
        let mut spaces = Vec::with_capacity(mesh.ports.len());
        for p in 0..mesh.ports.len() {
            let full = 2 * mesh.ports[p].nodes.len();
            // a global count larger than a port's DoFs keeps every DoF of that port
            let k = match kind {
                PortModeKind::Reduced(n) if n >= full => PortModeKind::Full,
                other => other,
            };
            spaces.push(build_port_modes(&mesh, p, k)?);
        }
        let extensions = harmonic_extensions(&mesh, &spaces, &clamped_tags)?;
        Self::from_parts(id, mesh, domain, clamped_tags, spaces, extensions)
    }

    pub fn from_parts(
        id: &str,
        mesh: Mesh,
        domain: ParameterDomain,
        clamped_tags: Vec<u32>,
        port_spaces: Vec<PortSpace>,
        extensions: Mat<f64>,
    ) -> Result<Self> {
        for t in &clamped_tags {
            if !mesh.boundary_tags().contains(t) {
                return Err(Error::UnknownTag(*t));
            }
        }
        let operator = AffineOperator::build(&mesh)?;
        let mut mode_offsets = vec![0];
        for s in &port_spaces {
            mode_offsets.push(mode_offsets.last().unwrap() + s.count());
        }
        let interior = interior_dofs(&mesh, &clamped_tags);
        let unit_loads = [body_load(&mesh, [1.0, 0.0]), body_load(&mesh, [0.0, 1.0])];
        Ok(Self {
            id: id.to_string(),
            mesh,
            operator,
            domain,
            clamped_tags,
            port_spaces,
            mode_offsets,
            extensions,
            interior,
            unit_loads,
        })
    }

    pub fn n_modes(&self) -> usize {
        *self.mode_offsets.last().unwrap()
    }

    /// `(port, local mode)` of a global mode column.
    pub fn mode_port(&self, k: usize) -> (usize, usize) {
        let p = self.mode_offsets.partition_point(|&o| o <= k) - 1;
        (p, k - self.mode_offsets[p])
    }

    pub fn extension(&self, k: usize) -> Vec<f64> {
        crate::linalg::col_to_vec(self.extensions.as_ref(), k)
    }

    pub fn extensions_of_port(&self, port: usize) -> MatRef<'_, f64> {
        let (a, b) = (self.mode_offsets[port], self.mode_offsets[port + 1]);
        self.extensions.as_ref().subcols(a, b - a)
    }

    /// Load vector of a body force `ρg` given per unit volume.
    pub fn force_load(&self, body_force: [f64; 2]) -> Vec<f64> {
        self.unit_loads[0]
            .iter()
            .zip(&self.unit_loads[1])
            .map(|(x, y)| body_force[0] * x + body_force[1] * y)
            .collect()
    }

    pub fn interior_matrix(&self, e: f64, nu: f64) -> CscMatrix {
        self.operator.assemble(e, nu).submatrix(&self.interior, &self.interior)
    }

    pub fn interior_solver(&self, e: f64, nu: f64) -> Result<InteriorSolver> {
        crate::fem::check_material(e, nu)?;
        let matrix = self.interior_matrix(e, nu);
        let factor = SpdFactor::new(&matrix)?;
        Ok(InteriorSolver { e, nu, matrix, factor })
    }

    /// Interior restriction of a full-length vector.
    pub fn restrict(&self, v: &[f64]) -> Vec<f64> {
        self.interior.iter().map(|&d| v[d]).collect()
    }

    /// Full-length vector that is zero outside the interior.
    pub fn prolong(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mesh.n_dofs()];
        for (k, &d) in self.interior.iter().enumerate() {
            out[d] = v[k];
        }
        out
    }

    /// Bubble `b` with `a(b, v) = −a(ψ, v)` for every interior test DoF.
    pub fn solve_bubble_fe(&self, solver: &InteriorSolver, extension: &[f64]) -> Vec<f64> {
        let r = self.operator.apply(solver.e, solver.nu, extension);
        let rhs: Vec<f64> = self.interior.iter().map(|&d| -r[d]).collect();
        self.prolong(&solver.solve(&rhs))
    }

    /// Bubble `b^f` with `a(b^f, v) = f(v)` for every interior test DoF.
    pub fn solve_force_bubble_fe(&self, solver: &InteriorSolver, body_force: [f64; 2]) -> Vec<f64> {
        let f = self.force_load(body_force);
        self.prolong(&solver.solve(&self.restrict(&f)))
    }
}

/// Factorized interior block `A_II(μ)`.
pub struct InteriorSolver {
    pub e: f64,
    pub nu: f64,
    pub matrix: CscMatrix,
    pub factor: SpdFactor,
}

impl InteriorSolver {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        if rhs.iter().all(|&v| v == 0.0) {
            return vec![0.0; rhs.len()];
        }
        crate::fem::solve_with_factor(&self.factor, &self.matrix, rhs).unwrap_or_else(|_| self.factor.solve(rhs))
    }

    pub fn solve_many(&self, rhs: &mut Mat<f64>) {
        self.factor.solve_in_place(rhs.as_mut());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn open_chain_first_mode_is_constant() {
        let pts: Vec<[f64; 2]> = (0..5).map(|k| [k as f64, 0.0]).collect();
        let lap = chain_laplacian(&pts, false);
        let eig = lap.self_adjoint_eigen(Side::Lower).unwrap();
        assert!(eig.S()[0].abs() < 1e-12);
        let u0 = eig.U().col(0);
        let c = u0[0];
        assert!((c.abs() - 1.0 / 5f64.sqrt()).abs() < 1e-12);
        for i in 0..5 {
            assert!((u0[i] - c).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_is_log_spaced() {
        let d = ParameterDomain { e_min: 1.0, e_max: 100.0, nu_min: 0.1, nu_max: 0.3 };
        let g = d.grid(3, 2);
        assert_eq!(g.len(), 6);
        assert!((g[1].0 - 10.0).abs() < 1e-12);
        assert!((g[3].1 - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mode_kind_parses() {
        assert_eq!("full".parse::<PortModeKind>().unwrap(), PortModeKind::Full);
        assert_eq!("6".parse::<PortModeKind>().unwrap(), PortModeKind::Reduced(6));
        assert!("x".parse::<PortModeKind>().is_err());
    }
}
