//! System instantiation, global ports, the statically condensed system and
//! field reconstruction.
//!
//! Every component contributes a local Schur block over its own port modes,
//! expressed in its local frame. A mode map `T` carries those local modes to
//! the modes of the global port: the global port's basis is the master
//! side's modes rotated into the global frame, and `T = Wᵀ·P·W_master` for
//! the other side, where `P` matches node orders.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{online_bubbles, rotational_buffer, NeighborPort, RotationOperator, RotationalEvaluation, RotationalMaterial};
use crate::archetype::Archetype;
use crate::fem::node_dofs;
use crate::library::{Library, TrainedArchetype};
use crate::linalg::{dense_max_abs, norm2, DenseSpd, SolveError};
use crate::mesh::{distance, merge_conforming, place_mesh, placed_port_points, Merged, Mesh, Placement, Point};
use crate::rb::RbEvaluation;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    /// Mass density; the body force is `density · gravity`.
    #[serde(default)]
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    /// Defaults to `i<index>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub archetype: String,
    #[serde(default)]
    pub translate: Point,
    /// Degrees, counter-clockwise.
    #[serde(default)]
    pub rotate: f64,
    pub material: MaterialSpec,
    /// Angle of a rotational component, degrees.
    #[serde(default)]
    pub adaptive_theta: Option<f64>,
    /// Name of a rotational instance whose rotation this instance shares.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub follows: Option<String>,
}

/// `(instance name, port name)`
pub type PortRef = (String, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub instances: Vec<InstanceSpec>,
    #[serde(default)]
    pub connections: Vec<[PortRef; 2]>,
    #[serde(default)]
    pub clamped: Vec<PortRef>,
    #[serde(default)]
    pub gravity: [f64; 2],
}

/// Maps an angle in degrees into `(−180, 180]`, warning when it had to move.
pub fn normalize_degrees(theta: f64) -> f64 {
    let mut t = theta % 360.0;
    if t > 180.0 {
        t -= 360.0;
    } else if t <= -180.0 {
        t += 360.0;
    }
    if !(-180.0..=180.0).contains(&theta) {
        log::warn!("angle {theta} deg normalized to {t} deg");
    }
    t
}

impl SystemConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::parse("<system>", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn instance_name(&self, i: usize) -> String {
        self.instances[i].name.clone().unwrap_or_else(|| format!("i{i}"))
    }

    /// Copy with every adaptive angle replaced by `theta` degrees.
    pub fn with_theta(&self, theta: f64) -> Self {
        let mut out = self.clone();
        for inst in &mut out.instances {
            if inst.adaptive_theta.is_some() {
                inst.adaptive_theta = Some(theta);
            }
        }
        out
    }
}

/// One placed component.
#[derive(Debug, Clone)]
pub struct Instance {
    pub name: String,
    pub archetype: String,
    pub placement: Placement,
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    /// `ρ g` in the global frame.
    pub body_force: [f64; 2],
    /// Adaptive port of a rotational instance.
    pub adaptive_port: Option<usize>,
}

impl Instance {
    /// Body force in the component's own frame.
    pub fn local_body_force(&self) -> [f64; 2] {
        self.placement.apply_vector_inverse(self.body_force)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortSide {
    pub instance: usize,
    pub port: usize,
}

#[derive(Debug, Clone)]
pub struct GlobalPort {
    /// Coincidence set, master first.
    pub sides: Vec<PortSide>,
    pub n_modes: usize,
    /// First row in the condensed system; `None` when clamped.
    pub offset: Option<usize>,
    /// Connection mediated by a buffer layer.
    pub adaptive: bool,
    /// Master modes in the global frame over master port DoFs.
    pub basis: Mat<f64>,
}

/// Where a group of local modes goes in the condensed system.
#[derive(Debug, Clone)]
pub struct ModeMap {
    pub global_port: usize,
    /// Local coefficients `= transform · U_p`.
    pub transform: Mat<f64>,
}

#[derive(Debug, Clone)]
pub struct GlobalPortTable {
    pub ports: Vec<GlobalPort>,
    /// `local[i][j]` for instance `i`, local port `j`.
    pub local: Vec<Vec<ModeMap>>,
    pub n_sc: usize,
}

impl GlobalPortTable {
    /// `(global port, mode)` of every condensed row.
    pub fn row_index(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0); self.n_sc];
        for (p, gp) in self.ports.iter().enumerate() {
            if let Some(o) = gp.offset {
                for k in 0..gp.n_modes {
                    out[o + k] = (p, k);
                }
            }
        }
        out
    }
}

/// A buffer-mediated connection.
#[derive(Debug, Clone)]
pub struct AdaptiveLink {
    pub rotational: usize,
    pub port: usize,
    pub neighbor: PortSide,
    pub global_port: usize,
}

#[derive(Debug, Clone)]
pub struct System {
    pub instances: Vec<Instance>,
    pub table: GlobalPortTable,
    pub adaptive: Vec<AdaptiveLink>,
    /// Instances whose archetype clamps boundary tags, with those tags.
    pub clamped_ports: Vec<PortSide>,
}

fn port_ref_name(_config: &SystemConfig, r: &PortRef) -> String {
    format!("{}.{}", r.0, r.1)
}

/// Global-frame modes `Rot(φ)·χ` of one local port.
fn global_modes(lib: &Library, inst: &Instance, port: usize) -> Result<Mat<f64>> {
    let arch = &lib.get(&inst.archetype)?.arch;
    let mut w = arch.port_spaces[port].modes.clone();
    RotationOperator::new(inst.placement.angle).apply_columns(&mut w);
    Ok(w)
}

/// Places instances, numbers global ports and builds the mode maps.
pub fn instantiate(config: &SystemConfig, lib: &Library) -> Result<System> {
    let n = config.instances.len();
    let mut names: HashMap<String, usize> = HashMap::new();
    for i in 0..n {
        let name = config.instance_name(i);
        if names.insert(name.clone(), i).is_some() {
            return Err(Error::Config(format!("duplicate instance name '{name}'")));
        }
    }
    let mut archs: Vec<&TrainedArchetype> = Vec::with_capacity(n);
    for spec in &config.instances {
        archs.push(lib.get(&spec.archetype)?);
        crate::fem::check_material(spec.material.youngs_modulus, spec.material.poisson_ratio)?;
    }

    // base placements, then the rotation of rotational instances and their followers
    let base: Vec<Placement> = config
        .instances
        .iter()
        .map(|s| Placement {
            angle: s.rotate.to_radians(),
            translation: s.translate,
        })
        .collect();
    let mut placements = base.clone();
    for (i, spec) in config.instances.iter().enumerate() {
        let leader = match &spec.follows {
            Some(name) => *names
                .get(name)
                .ok_or_else(|| Error::Config(format!("instance '{}' follows unknown instance '{name}'", config.instance_name(i))))?,
            None if spec.adaptive_theta.is_some() => i,
            None => continue,
        };
        let lead = &config.instances[leader];
        let theta = lead
            .adaptive_theta
            .ok_or_else(|| Error::Config(format!("instance '{}' follows '{}', which has no adaptive angle", config.instance_name(i), config.instance_name(leader))))?;
        let split = archs[leader].rotational.as_ref().ok_or_else(|| {
            Error::Config(format!("instance '{}' has an adaptive angle but archetype '{}' is not rotational", config.instance_name(leader), lead.archetype))
        })?;
        if lead.follows.is_some() {
            return Err(Error::Config(format!("instance '{}' cannot both rotate and follow", config.instance_name(leader))));
        }
        let theta = normalize_degrees(theta).to_radians();
        let c = base[leader].apply(split.center);
        let t = spec.translate;
        let moved = crate::mesh::rotate_point(t, c, theta);
        placements[i] = Placement {
            angle: base[i].angle + theta,
            translation: moved,
        };
    }

    let mut instances = Vec::with_capacity(n);
    for (i, spec) in config.instances.iter().enumerate() {
        let rho = spec.material.density;
        instances.push(Instance {
            name: config.instance_name(i),
            archetype: spec.archetype.clone(),
            placement: placements[i],
            youngs_modulus: spec.material.youngs_modulus,
            poisson_ratio: spec.material.poisson_ratio,
            body_force: [rho * config.gravity[0], rho * config.gravity[1]],
            adaptive_port: archs[i].rotational.as_ref().map(|s| s.adaptive_port),
        });
    }
    let moving: Vec<bool> = config
        .instances
        .iter()
        .map(|s| s.adaptive_theta.is_some() || s.follows.is_some())
        .collect();

    let resolve = |r: &PortRef| -> Result<PortSide> {
        let i = *names
            .get(&r.0)
            .ok_or_else(|| Error::Config(format!("dangling connection: no instance '{}'", r.0)))?;
        let port = archs[i]
            .arch
            .mesh
            .port_index(&r.1)
            .ok_or_else(|| Error::Config(format!("dangling connection: instance '{}' has no port '{}'", r.0, r.1)))?;
        Ok(PortSide { instance: i, port })
    };

    let mut used: BTreeMap<PortSide, usize> = BTreeMap::new();
    let mut ports: Vec<GlobalPort> = Vec::new();
    let mut local: Vec<Vec<Option<ModeMap>>> = archs.iter().map(|a| vec![None; a.arch.mesh.ports.len()]).collect();
    let mut adaptive = Vec::new();
    let scale = archs
        .iter()
        .zip(&instances)
        .map(|(a, inst)| a.arch.mesh.bbox_diagonal() + distance(inst.placement.translation, [0.0, 0.0]))
        .fold(1.0f64, f64::max);
    let tol = 1e-8 * scale;

    for pair in &config.connections {
        let a = resolve(&pair[0])?;
        let b = resolve(&pair[1])?;
        for side in [a, b] {
            if used.contains_key(&side) {
                let which = if side == a { &pair[0] } else { &pair[1] };
                return Err(Error::Config(format!("duplicate connection: port {} appears twice", port_ref_name(config, which))));
            }
        }
        if a.instance == b.instance {
            return Err(Error::Config(format!("connection joins instance '{}' to itself", pair[0].0)));
        }
        let is_adaptive = |s: PortSide| instances[s.instance].adaptive_port == Some(s.port);
        let gp = ports.len();
        if is_adaptive(a) || is_adaptive(b) {
            let (rot, nb) = if is_adaptive(a) { (a, b) } else { (b, a) };
            if is_adaptive(nb) || moving[nb.instance] {
                return Err(Error::Config(format!(
                    "adaptive connection {} - {} needs a stationary neighbour",
                    port_ref_name(config, &pair[0]),
                    port_ref_name(config, &pair[1])
                )));
            }
            if !moving[rot.instance] {
                return Err(Error::Config(format!("rotational instance '{}' needs an adaptive angle", instances[rot.instance].name)));
            }
            let w = global_modes(lib, &instances[nb.instance], nb.port)?;
            let m = w.ncols();
            local[nb.instance][nb.port] = Some(ModeMap {
                global_port: gp,
                transform: Mat::identity(m, m),
            });
            local[rot.instance][rot.port] = Some(ModeMap {
                global_port: gp,
                transform: Mat::identity(m, m),
            });
            ports.push(GlobalPort {
                sides: vec![nb, rot],
                n_modes: m,
                offset: None,
                adaptive: true,
                basis: w,
            });
            adaptive.push(AdaptiveLink {
                rotational: rot.instance,
                port: rot.port,
                neighbor: nb,
                global_port: gp,
            });
        } else {
            let wa = global_modes(lib, &instances[a.instance], a.port)?;
            let t = slave_transform(lib, &instances, a, b, &wa, tol).map_err(|reason| Error::IncompatiblePort {
                a: port_ref_name(config, &pair[0]),
                b: port_ref_name(config, &pair[1]),
                reason,
            })?;
            let m = wa.ncols();
            local[a.instance][a.port] = Some(ModeMap {
                global_port: gp,
                transform: Mat::identity(m, m),
            });
            local[b.instance][b.port] = Some(ModeMap {
                global_port: gp,
                transform: t,
            });
            ports.push(GlobalPort {
                sides: vec![a, b],
                n_modes: m,
                offset: None,
                adaptive: false,
                basis: wa,
            });
        }
        used.insert(a, gp);
        used.insert(b, gp);
    }

    for (i, inst) in instances.iter().enumerate() {
        for j in 0..local[i].len() {
            if local[i][j].is_some() {
                continue;
            }
            let side = PortSide { instance: i, port: j };
            if inst.adaptive_port == Some(j) {
                return Err(Error::Config(format!("adaptive port of rotational instance '{}' is not connected", inst.name)));
            }
            let w = global_modes(lib, inst, j)?;
            let m = w.ncols();
            local[i][j] = Some(ModeMap {
                global_port: ports.len(),
                transform: Mat::identity(m, m),
            });
            used.insert(side, ports.len());
            ports.push(GlobalPort {
                sides: vec![side],
                n_modes: m,
                offset: None,
                adaptive: false,
                basis: w,
            });
        }
    }

    let mut clamped_ports = Vec::new();
    let mut clamped = vec![false; ports.len()];
    for r in &config.clamped {
        let side = resolve(r)?;
        clamped[used[&side]] = true;
        clamped_ports.push(side);
    }
    let mut n_sc = 0;
    for (p, gp) in ports.iter_mut().enumerate() {
        if clamped[p] {
            // the body side of an adaptive port is not a constraint of its own
            let owners = if gp.adaptive { 1 } else { gp.sides.len() };
            for s in &gp.sides[..owners] {
                if !clamped_ports.contains(s) {
                    clamped_ports.push(*s);
                }
            }
            continue;
        }
        gp.offset = Some(n_sc);
        n_sc += gp.n_modes;
    }
    let local = local.into_iter().map(|v| v.into_iter().map(|m| m.expect("every port mapped")).collect()).collect();
    Ok(System {
        instances,
        table: GlobalPortTable { ports, local, n_sc },
        adaptive,
        clamped_ports,
    })
}

/// `T = W_bᵀ P W_a` with the node-order match `P` and the span check.
fn slave_transform(lib: &Library, instances: &[Instance], a: PortSide, b: PortSide, wa: &Mat<f64>, tol: f64) -> std::result::Result<Mat<f64>, String> {
    let ma = &lib.get(&instances[a.instance].archetype).map_err(|e| e.to_string())?.arch.mesh;
    let mb = &lib.get(&instances[b.instance].archetype).map_err(|e| e.to_string())?.arch.mesh;
    let pa = placed_port_points(ma, a.port, &instances[a.instance].placement);
    let pb = placed_port_points(mb, b.port, &instances[b.instance].placement);
    if pa.len() != pb.len() {
        return Err(format!("port grids differ ({} vs {} nodes) and no adaptive port is declared", pa.len(), pb.len()));
    }
    let mut perm = vec![usize::MAX; pa.len()];
    for (k, &p) in pa.iter().enumerate() {
        let hit = pb
            .iter()
            .enumerate()
            .filter(|(_, &q)| distance(p, q) <= tol)
            .min_by(|x, y| distance(p, *x.1).total_cmp(&distance(p, *y.1)));
        match hit {
            Some((l, _)) => perm[k] = l,
            None => {
                return Err(format!(
                    "port grids do not coincide (node at ({:.6e}, {:.6e}) has no partner) and no adaptive port is declared",
                    p[0], p[1]
                ))
            }
        }
    }
    let mut seen = vec![false; pb.len()];
    for &l in &perm {
        if std::mem::replace(&mut seen[l], true) {
            return Err("port grids do not match one to one".into());
        }
    }
    let wb = global_modes(lib, &instances[b.instance], b.port).map_err(|e| e.to_string())?;
    if wb.ncols() != wa.ncols() {
        return Err(format!("mode counts differ ({} vs {})", wa.ncols(), wb.ncols()));
    }
    let mut pwa = Mat::<f64>::zeros(wa.nrows(), wa.ncols());
    for (k, &l) in perm.iter().enumerate() {
        for c in 0..wa.ncols() {
            pwa[(2 * l, c)] = wa[(2 * k, c)];
            pwa[(2 * l + 1, c)] = wa[(2 * k + 1, c)];
        }
    }
    let t = wb.transpose() * &pwa;
    let resid = &wb * &t - &pwa;
    let r = dense_max_abs(resid.as_ref());
    if r > 1e-10 {
        return Err(format!("mode spaces differ after placement (residual {r:.3e})"));
    }
    Ok(t)
}

/// Bubble representation for stationary components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BubbleSource {
    ReducedBasis,
    FeExact,
}

/// FE-exact condensation data of one archetype at one `(E, ν)`.
#[derive(Debug)]
pub struct LocalFe {
    pub schur: Mat<f64>,
    /// Load for unit body forces along x and y.
    pub unit_load: [Vec<f64>; 2],
    /// Mode bubbles over interior DoFs, one column per mode.
    pub bubbles: Mat<f64>,
    pub unit_force_bubbles: [Vec<f64>; 2],
}

impl LocalFe {
    pub fn build(arch: &Archetype, e: f64, nu: f64) -> Result<Self> {
        let solver = arch.interior_solver(e, nu)?;
        let k = arch.operator.assemble(e, nu);
        let m = arch.n_modes();
        let n_i = arch.interior.len();
        let k_psi = k.mul_dense(arch.extensions.as_ref());
        let mut rhs = Mat::from_fn(n_i, m + 2, |i, j| {
            let d = arch.interior[i];
            if j < m {
                -k_psi[(d, j)]
            } else {
                arch.unit_loads[j - m][d]
            }
        });
        let rhs0 = rhs.clone();
        solver.solve_many(&mut rhs);
        // one refinement pass per column keeps the residual at solver precision
        let k_ii = &solver.matrix;
        let resid = {
            let kx = k_ii.mul_dense(rhs.as_ref());
            &rhs0 - &kx
        };
        let mut corr = resid;
        solver.solve_many(&mut corr);
        let sol = &rhs + &corr;

        let bubbles = sol.as_ref().subcols(0, m).to_owned();
        let mut schur = arch.extensions.transpose() * &k_psi;
        // Bᵀ (Kψ)_I = −Bᵀ rhs
        let coupling = bubbles.transpose() * rhs0.as_ref().subcols(0, m);
        schur -= &coupling;
        crate::linalg::symmetrize(&mut schur);
        let unit_load = [0, 1].map(|c| {
            (0..m)
                .map(|a| {
                    let psi: f64 = (0..arch.mesh.n_dofs()).map(|d| arch.unit_loads[c][d] * arch.extensions[(d, a)]).sum();
                    let bub: f64 = (0..n_i).map(|i| rhs0[(i, m + c)] * bubbles[(i, a)]).sum();
                    psi + bub
                })
                .collect()
        });
        let unit_force_bubbles = [0, 1].map(|c| (0..n_i).map(|i| sol[(i, m + c)]).collect());
        Ok(Self {
            schur,
            unit_load,
            bubbles,
            unit_force_bubbles,
        })
    }
}

/// What one component contributes and how to rebuild its field.
enum LocalData {
    Fe(Arc<LocalFe>),
    Rb(RbEvaluation),
    Rotational(Box<RotationalEvaluation>),
}

struct Contribution {
    schur: Mat<f64>,
    load: Vec<f64>,
    /// Local mode groups in order: (mode map, width).
    groups: Vec<ModeMap>,
    data: LocalData,
}

#[derive(Debug, Clone)]
pub struct CondensedSystem {
    pub matrix: Mat<f64>,
    pub load: Vec<f64>,
    /// `(global port, mode)` per row.
    pub index: Vec<(usize, usize)>,
}

impl CondensedSystem {
    pub fn dim(&self) -> usize {
        self.load.len()
    }
}

/// Wall-clock breakdown of one evaluation, seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub buffer_mesh_generation_s: f64,
    pub bubble_function_s: f64,
    pub solution_computation_s: f64,
    pub total_s: f64,
}

/// Solution of the condensed system together with per-piece fields.
#[derive(Debug, Clone)]
pub struct RomSolution {
    pub condensed: CondensedSystem,
    pub coefficients: Vec<f64>,
    /// Global-frame displacement of each instance on its placed mesh.
    pub instance_fields: Vec<Vec<f64>>,
    /// Buffer meshes (global frame) and their displacements, one per adaptive link.
    pub buffers: Vec<(Mesh, Vec<f64>)>,
    /// Number of main-body factorization solves per adaptive link.
    pub factor_solves: Vec<usize>,
    pub timing: Timing,
}

fn block_of(groups: &[ModeMap]) -> Vec<usize> {
    let mut off = vec![0];
    for g in groups {
        off.push(off.last().unwrap() + g.transform.nrows());
    }
    off
}

/// Accumulates component Schur blocks into the condensed system.
fn assemble(table: &GlobalPortTable, contributions: &[Contribution]) -> CondensedSystem {
    let n = table.n_sc;
    let mut matrix = Mat::<f64>::zeros(n, n);
    let mut load = vec![0.0; n];
    for c in contributions {
        let off = block_of(&c.groups);
        for (g1, m1) in c.groups.iter().enumerate() {
            let Some(o1) = table.ports[m1.global_port].offset else { continue };
            let l1 = c.load[off[g1]..off[g1 + 1]].to_vec();
            let t1 = &m1.transform;
            for (p, v) in (0..t1.ncols()).map(|p| (p, (0..t1.nrows()).map(|r| t1[(r, p)] * l1[r]).sum::<f64>())) {
                load[o1 + p] += v;
            }
            for (g2, m2) in c.groups.iter().enumerate() {
                let Some(o2) = table.ports[m2.global_port].offset else { continue };
                let s = c.schur.as_ref().submatrix(off[g1], off[g2], off[g1 + 1] - off[g1], off[g2 + 1] - off[g2]);
                let block = m1.transform.transpose() * s * &m2.transform;
                for i in 0..block.nrows() {
                    for j in 0..block.ncols() {
                        matrix[(o1 + i, o2 + j)] += block[(i, j)];
                    }
                }
            }
        }
    }
    crate::linalg::symmetrize(&mut matrix);
    CondensedSystem {
        matrix,
        load,
        index: table.row_index(),
    }
}

/// Dense SPD solve of the condensed system with a residual check.
pub fn solve_condensed(system: &CondensedSystem) -> Result<Vec<f64>> {
    let n = system.dim();
    if n == 0 {
        return Ok(vec![]);
    }
    let fnorm = norm2(&system.load);
    let chol = DenseSpd::new(system.matrix.as_ref(), 1e-12).map_err(|e| match e {
        SolveError::Singular { .. } | SolveError::NotPositiveDefinite { .. } => Error::InsufficientConstraints(format!(
            "condensed system of dimension {n} is singular; clamp at least one port ({e})"
        )),
        other => Error::from(other),
    })?;
    let mut u = chol.solve_vec(&system.load);
    if fnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    for _ in 0..3 {
        let r: Vec<f64> = (0..n)
            .map(|i| system.load[i] - (0..n).map(|j| system.matrix[(i, j)] * u[j]).sum::<f64>())
            .collect();
        if norm2(&r) <= 1e-10 * fnorm {
            return Ok(u);
        }
        let d = chol.solve_vec(&r);
        for (ui, di) in u.iter_mut().zip(d) {
            *ui += di;
        }
    }
    let r: Vec<f64> = (0..n)
        .map(|i| system.load[i] - (0..n).map(|j| system.matrix[(i, j)] * u[j]).sum::<f64>())
        .collect();
    let rel = norm2(&r) / fnorm;
    if rel <= 1e-10 {
        Ok(u)
    } else {
        Err(Error::InsufficientConstraints(format!(
            "condensed solve residual {rel:.3e} exceeds 1e-10; the system is nearly singular"
        )))
    }
}

type FeKey = (String, u64, u64);

/// Runs the online stage: rotational bubbles, local Schur blocks,
/// condensed assembly and solve, and reconstruction.
pub fn online_solve(system: &System, lib: &Library, source: BubbleSource) -> Result<RomSolution> {
    let t_total = Instant::now();

    // FE-exact data of stationary components, one build per (archetype, E, ν)
    let mut fe_cache: HashMap<FeKey, Arc<LocalFe>> = HashMap::new();
    let t_bubble = Instant::now();
    if source == BubbleSource::FeExact {
        let mut keys: Vec<FeKey> = system
            .instances
            .iter()
            .filter(|i| i.adaptive_port.is_none())
            .map(|i| (i.archetype.clone(), i.youngs_modulus.to_bits(), i.poisson_ratio.to_bits()))
            .collect();
        keys.sort();
        keys.dedup();
        let built: Vec<Result<(FeKey, Arc<LocalFe>)>> = keys
            .into_par_iter()
            .map(|key| {
                let arch = &lib.get(&key.0)?.arch;
                let fe = LocalFe::build(arch, f64::from_bits(key.1), f64::from_bits(key.2)).map_err(|e| e.in_stage(&format!("bubbles of '{}'", key.0)))?;
                Ok((key, Arc::new(fe)))
            })
            .collect();
        for r in built {
            let (k, v) = r?;
            fe_cache.insert(k, v);
        }
    }
    let fe_s = t_bubble.elapsed().as_secs_f64();

    let results: Vec<Result<(Contribution, f64, f64)>> = (0..system.instances.len())
        .into_par_iter()
        .map(|i| contribution(system, lib, source, &fe_cache, i))
        .collect();
    let mut contributions = Vec::with_capacity(results.len());
    let mut buffer_s = 0.0;
    let mut bubble_s = fe_s;
    for r in results {
        let (c, b, t) = r?;
        buffer_s += b;
        bubble_s += t;
        contributions.push(c);
    }

    let t_solve = Instant::now();
    let condensed = assemble(&system.table, &contributions);
    let coefficients = solve_condensed(&condensed).map_err(|e| e.in_stage("condensed solve"))?;

    // reconstruction
    let mut instance_fields = Vec::with_capacity(contributions.len());
    let mut buffers = Vec::new();
    let mut factor_solves = Vec::new();
    for (i, c) in contributions.iter().enumerate() {
        let inst = &system.instances[i];
        let trained = lib.get(&inst.archetype)?;
        let arch = &trained.arch;
        let local = local_coefficients(&system.table, &c.groups, &coefficients);
        match &c.data {
            LocalData::Fe(fe) => {
                let mut u = vec![0.0; arch.mesh.n_dofs()];
                for (a, &ca) in local.iter().enumerate() {
                    if ca != 0.0 {
                        for (d, ud) in u.iter_mut().enumerate() {
                            *ud += ca * arch.extensions[(d, a)];
                        }
                    }
                }
                let g = inst.local_body_force();
                for (k, &d) in arch.interior.iter().enumerate() {
                    let mut v = g[0] * fe.unit_force_bubbles[0][k] + g[1] * fe.unit_force_bubbles[1][k];
                    for (a, &ca) in local.iter().enumerate() {
                        v += ca * fe.bubbles[(k, a)];
                    }
                    u[d] += v;
                }
                RotationOperator::new(inst.placement.angle).apply(&mut u);
                instance_fields.push(u);
            }
            LocalData::Rb(eval) => {
                let rb = trained
                    .rb
                    .as_ref()
                    .ok_or_else(|| Error::MissingData(format!("archetype '{}' has no reduced basis", arch.id)))?;
                let mut u = rb.model.reconstruct(arch, &rb.spaces, eval, &local);
                RotationOperator::new(inst.placement.angle).apply(&mut u);
                instance_fields.push(u);
            }
            LocalData::Rotational(eval) => {
                let split = trained.rotational.as_ref().expect("rotational data");
                let (buf, body) = eval.reconstruct(arch, split, &local);
                buffers.push((eval.buffer.clone(), buf));
                factor_solves.push(eval.factor_solves);
                instance_fields.push(body);
            }
        }
    }
    let solve_s = t_solve.elapsed().as_secs_f64();
    let total_s = t_total.elapsed().as_secs_f64();
    Ok(RomSolution {
        condensed,
        coefficients,
        instance_fields,
        buffers,
        factor_solves,
        timing: Timing {
            buffer_mesh_generation_s: buffer_s,
            bubble_function_s: bubble_s,
            solution_computation_s: solve_s,
            total_s,
        },
    })
}

/// Local coefficients `T·U_p` for each group, zero for clamped ports.
fn local_coefficients(table: &GlobalPortTable, groups: &[ModeMap], u: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in groups {
        let t = &g.transform;
        match table.ports[g.global_port].offset {
            Some(o) => {
                for r in 0..t.nrows() {
                    out.push((0..t.ncols()).map(|c| t[(r, c)] * u[o + c]).sum());
                }
            }
            None => out.extend(std::iter::repeat(0.0).take(t.nrows())),
        }
    }
    out
}

fn contribution(system: &System, lib: &Library, source: BubbleSource, fe_cache: &HashMap<FeKey, Arc<LocalFe>>, i: usize) -> Result<(Contribution, f64, f64)> {
    let inst = &system.instances[i];
    let trained = lib.get(&inst.archetype)?;
    let arch = &trained.arch;
    let groups = system.table.local[i].clone();
    if let Some(split) = &trained.rotational {
        let link = system
            .adaptive
            .iter()
            .find(|l| l.rotational == i)
            .ok_or_else(|| Error::Config(format!("rotational instance '{}' has no adaptive connection", inst.name)))?;
        let nb = &system.instances[link.neighbor.instance];
        let nb_mesh = &lib.get(&nb.archetype)?.arch.mesh;
        let neighbor = neighbor_port(nb_mesh, link.neighbor.port, &nb.placement);
        let modes = system.table.ports[link.global_port].basis.clone();
        let eval = online_bubbles(
            arch,
            split,
            inst.placement,
            RotationalMaterial {
                e: inst.youngs_modulus,
                nu: inst.poisson_ratio,
                body_force: inst.body_force,
            },
            &neighbor,
            modes,
        )
        .map_err(|e| e.in_stage(&format!("rotational bubbles of '{}'", inst.name)))?;
        let mut ordered = vec![groups[split.adaptive_port].clone()];
        for (j, g) in groups.iter().enumerate() {
            if j != split.adaptive_port {
                ordered.push(g.clone());
            }
        }
        let (b, t) = (eval.buffer_s, eval.bubble_s);
        return Ok((
            Contribution {
                schur: eval.schur.clone(),
                load: eval.load.clone(),
                groups: ordered,
                data: LocalData::Rotational(Box::new(eval)),
            },
            b,
            t,
        ));
    }
    let t0 = Instant::now();
    let g = inst.local_body_force();
    if !arch.domain.contains(inst.youngs_modulus, inst.poisson_ratio) {
        log::warn!("instance '{}' material lies outside the training domain of '{}'", inst.name, arch.id);
    }
    let c = match source {
        BubbleSource::FeExact => {
            let key = (inst.archetype.clone(), inst.youngs_modulus.to_bits(), inst.poisson_ratio.to_bits());
            let fe = fe_cache[&key].clone();
            let load = (0..arch.n_modes()).map(|a| g[0] * fe.unit_load[0][a] + g[1] * fe.unit_load[1][a]).collect();
            Contribution {
                schur: fe.schur.clone(),
                load,
                groups,
                data: LocalData::Fe(fe),
            }
        }
        BubbleSource::ReducedBasis => {
            let rb = trained
                .rb
                .as_ref()
                .ok_or_else(|| Error::MissingData(format!("archetype '{}' was trained without reduced bases", arch.id)))?;
            let eval = rb.model.evaluate(inst.youngs_modulus, inst.poisson_ratio, g)?;
            Contribution {
                schur: eval.schur.clone(),
                load: eval.load.clone(),
                groups,
                data: LocalData::Rb(eval),
            }
        }
    };
    Ok((c, 0.0, t0.elapsed().as_secs_f64()))
}

/// Placed port of a stationary instance, as seen by a buffer.
pub fn neighbor_port(mesh: &Mesh, port: usize, placement: &Placement) -> NeighborPort {
    let p = &mesh.ports[port];
    NeighborPort {
        points: placed_port_points(mesh, port, placement),
        geometry: crate::adaptive::placed_geometry(p.geometry, placement),
        closed: p.closed,
    }
}

/// One placed mesh of a system with its material and constrained nodes.
#[derive(Debug, Clone)]
pub struct Piece {
    pub label: String,
    pub mesh: Mesh,
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub body_force: [f64; 2],
    pub clamped_nodes: Vec<usize>,
}

/// All placed meshes of a system: instances in order, then buffers.
#[derive(Debug, Clone)]
pub struct Scene {
    pub pieces: Vec<Piece>,
    pub buffer_s: f64,
}

impl System {
    pub fn scene(&self, lib: &Library) -> Result<Scene> {
        let mut pieces = Vec::with_capacity(self.instances.len() + self.adaptive.len());
        for (i, inst) in self.instances.iter().enumerate() {
            let arch = &lib.get(&inst.archetype)?.arch;
            let mesh = place_mesh(&arch.mesh, &inst.placement).with_region(i as u32);
            let mut clamped = arch.mesh.nodes_with_tags(&arch.clamped_tags);
            for s in self.clamped_ports.iter().filter(|s| s.instance == i) {
                clamped.extend_from_slice(&arch.mesh.ports[s.port].nodes);
            }
            clamped.sort_unstable();
            clamped.dedup();
            pieces.push(Piece {
                label: inst.name.clone(),
                mesh,
                youngs_modulus: inst.youngs_modulus,
                poisson_ratio: inst.poisson_ratio,
                body_force: inst.body_force,
                clamped_nodes: clamped,
            });
        }
        let t0 = Instant::now();
        for link in &self.adaptive {
            let rot = &self.instances[link.rotational];
            let nb = &self.instances[link.neighbor.instance];
            let nb_arch = &lib.get(&nb.archetype)?.arch;
            let neighbor = neighbor_port(&nb_arch.mesh, link.neighbor.port, &nb.placement);
            let body = &lib.get(&rot.archetype)?.arch.mesh;
            let region = pieces.len() as u32;
            let buffer = rotational_buffer(body, link.port, &rot.placement, &neighbor)?.with_region(region);
            // buffer nodes on a clamped neighbour port stay clamped
            let mut clamped = Vec::new();
            if self.clamped_ports.contains(&link.neighbor) {
                clamped.extend(0..neighbor.points.len());
            }
            pieces.push(Piece {
                label: format!("{}_buffer", rot.name),
                mesh: buffer,
                youngs_modulus: rot.youngs_modulus,
                poisson_ratio: rot.poisson_ratio,
                body_force: rot.body_force,
                clamped_nodes: clamped,
            });
        }
        Ok(Scene {
            pieces,
            buffer_s: t0.elapsed().as_secs_f64(),
        })
    }
}

impl Scene {
    pub fn merge(&self) -> Result<Merged> {
        let meshes: Vec<Mesh> = self.pieces.iter().map(|p| p.mesh.clone()).collect();
        let scale = meshes.iter().map(|m| {
            let (lo, hi) = m.bounding_box();
            distance(lo, hi).max(lo[0].abs().max(lo[1].abs()).max(hi[0].abs().max(hi[1].abs())))
        });
        let scale = scale.fold(1.0f64, f64::max);
        Ok(merge_conforming(&meshes, 1e-9 * scale)?)
    }

    /// `(E, ν)` of a merged-mesh region.
    pub fn material_of(&self, region: u32) -> (f64, f64) {
        let p = &self.pieces[region as usize];
        (p.youngs_modulus, p.poisson_ratio)
    }

    pub fn fe_dofs(&self, merged: &Merged) -> usize {
        merged.mesh.n_dofs()
    }
}

impl RomSolution {
    /// Per-piece fields in scene order.
    pub fn piece_fields(&self) -> Vec<&[f64]> {
        self.instance_fields
            .iter()
            .map(|v| v.as_slice())
            .chain(self.buffers.iter().map(|(_, v)| v.as_slice()))
            .collect()
    }

    /// Field on the merged mesh. Shared nodes take the value of the first
    /// piece that owns them.
    pub fn merged_field(&self, merged: &Merged) -> Vec<f64> {
        gather(merged, &self.piece_fields())
    }
}

/// Collects piece fields onto a merged mesh.
pub fn gather(merged: &Merged, fields: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; merged.mesh.n_dofs()];
    let mut set = vec![false; merged.mesh.n_nodes()];
    for (map, field) in merged.node_maps.iter().zip(fields) {
        for (v, &g) in map.iter().enumerate() {
            if !set[g] {
                set[g] = true;
                out[2 * g] = field[2 * v];
                out[2 * g + 1] = field[2 * v + 1];
            }
        }
    }
    out
}

/// Largest disagreement between pieces on shared nodes.
pub fn shared_node_mismatch(merged: &Merged, fields: &[&[f64]]) -> f64 {
    let reference = gather(merged, fields);
    let mut worst = 0.0f64;
    for (map, field) in merged.node_maps.iter().zip(fields) {
        for (v, &g) in map.iter().enumerate() {
            for c in 0..2 {
                worst = worst.max((field[2 * v + c] - reference[2 * g + c]).abs());
            }
        }
    }
    worst
}

/// DoFs of the nodes of one instance port, for trace comparisons.
pub fn port_trace(system: &System, lib: &Library, side: PortSide, field: &[f64]) -> Result<Vec<f64>> {
    let arch = &lib.get(&system.instances[side.instance].archetype)?.arch;
    Ok(node_dofs(&arch.mesh.ports[side.port].nodes).into_iter().map(|d| field[d]).collect())
}
