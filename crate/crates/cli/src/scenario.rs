//! The built-in rotor-in-housing scenario.
//!
//! A stationary hub (annulus clamped at its central hole) carries, through
//! an adaptive annular buffer, a rotating ring with three flats 120° apart.
//! A blade hangs off every flat at a conforming straight port. Gravity acts
//! on everything.

use std::path::{Path, PathBuf};

use apcms_core::archetype::{ParameterDomain, PortModeKind};
use apcms_core::library::{ArchetypeSpec, Library, TrainOverrides, TrainedArchetype, TrainingManifest};
use apcms_core::mesh::{save_mesh, BoundaryEdge, Mesh, Point, PortGeometry, Triangle};
use apcms_core::rb::GreedyOptions;
use apcms_core::synthesis::{InstanceSpec, MaterialSpec, SystemConfig};
use apcms_core::{Error, Result};

/// Nodes per closed port loop; 5° spacing.
pub const N_THETA: usize = 72;
pub const HUB_INNER: f64 = 0.3;
pub const HUB_OUTER: f64 = 1.0;
/// Buffer thickness is 5% of the hub's port radius.
pub const RING_INNER: f64 = 1.05;
/// Distance of each flat from the rotation center.
pub const FLAT_DISTANCE: f64 = 1.6;
/// Half opening of a flat, degrees.
pub const FLAT_HALF_ANGLE: f64 = 20.0;
pub const BLADE_LENGTH: f64 = 4.0;
pub const RING_LAYERS: usize = 7;

pub const TAG_PORT: u32 = 1;
pub const TAG_FREE: u32 = 2;

pub const GRAVITY: [f64; 2] = [0.0, -9.81];
pub const STEEL: MaterialSpec = MaterialSpec {
    youngs_modulus: 200e9,
    poisson_ratio: 0.3,
    density: 8000.0,
};
pub const COMPOSITE: MaterialSpec = MaterialSpec {
    youngs_modulus: 30e9,
    poisson_ratio: 0.3,
    density: 1800.0,
};
pub const DOMAIN: ParameterDomain = ParameterDomain {
    e_min: 1e10,
    e_max: 3e11,
    nu_min: 0.2,
    nu_max: 0.4,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Resolution {
    /// Blades meshed across their 9 root nodes; a few thousand DoFs.
    #[default]
    Coarse,
    /// Blade rows doubled three times above the root; tens of thousands of DoFs.
    Standard,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub hub: Mesh,
    pub ring: Mesh,
    pub blade: Mesh,
    pub manifest: TrainingManifest,
    pub system: SystemConfig,
}

fn flat_center_deg(b: usize) -> f64 {
    90.0 + 120.0 * b as f64
}

/// Geometric radii from `r0` to `r1` whose steps match the angular spacing.
fn graded_radii(r0: f64, r1: f64, n_theta: usize) -> Vec<f64> {
    let growth = 1.0 + std::f64::consts::TAU / n_theta as f64;
    let n = ((r1 / r0).ln() / growth.ln()).round().max(1.0) as usize;
    let q = (r1 / r0).powf(1.0 / n as f64);
    let mut r: Vec<f64> = (0..=n).map(|k| r0 * q.powi(k as i32)).collect();
    r[n] = r1;
    r
}

/// Quads `(k,i)-(k,i+1)-(k+1,i+1)-(k+1,i)` of a periodic layered grid, split
/// along alternating diagonals.
fn periodic_layers(n_layers: usize, n_theta: usize) -> Vec<Triangle> {
    let id = |k: usize, i: usize| k * n_theta + i % n_theta;
    let mut tris = Vec::new();
    for k in 0..n_layers {
        for i in 0..n_theta {
            let (a, b, c, d) = (id(k, i), id(k, i + 1), id(k + 1, i + 1), id(k + 1, i));
            if (i + k) % 2 == 0 {
                tris.push(Triangle { nodes: [a, b, c], region: 0 });
                tris.push(Triangle { nodes: [a, c, d], region: 0 });
            } else {
                tris.push(Triangle { nodes: [a, b, d], region: 0 });
                tris.push(Triangle { nodes: [b, c, d], region: 0 });
            }
        }
    }
    tris
}

fn loop_edges(first: usize, n: usize, tag: u32) -> Vec<BoundaryEdge> {
    (0..n)
        .map(|i| BoundaryEdge {
            nodes: [first + i, first + (i + 1) % n],
            tag,
        })
        .collect()
}

/// Annulus from the clamp hole to the hub's port circle.
pub fn hub_mesh() -> Result<Mesh> {
    let radii = graded_radii(HUB_INNER, HUB_OUTER, N_THETA);
    let n_r = radii.len() - 1;
    let mut nodes = Vec::new();
    for &r in &radii {
        for i in 0..N_THETA {
            let a = std::f64::consts::TAU * i as f64 / N_THETA as f64;
            nodes.push([r * a.cos(), r * a.sin()]);
        }
    }
    let mut edges = loop_edges(0, N_THETA, TAG_PORT);
    edges.extend(loop_edges(n_r * N_THETA, N_THETA, TAG_PORT));
    let base: Vec<usize> = (0..N_THETA).collect();
    let rim: Vec<usize> = (n_r * N_THETA..(n_r + 1) * N_THETA).collect();
    Ok(Mesh::new(
        nodes,
        periodic_layers(n_r, N_THETA),
        edges,
        vec![
            ("base".into(), base, PortGeometry::Arc { center: [0.0, 0.0], radius: HUB_INNER }),
            ("rim".into(), rim, PortGeometry::Arc { center: [0.0, 0.0], radius: HUB_OUTER }),
        ],
    )?)
}

/// Offset of ray `i` from the center of flat `b`, degrees, if it hits it.
fn flat_offset(i: usize) -> Option<(usize, f64)> {
    let alpha = 360.0 * i as f64 / N_THETA as f64;
    for b in 0..3 {
        let mut off = alpha - flat_center_deg(b);
        off -= 360.0 * (off / 360.0).round();
        if off.abs() <= FLAT_HALF_ANGLE + 1e-9 {
            return Some((b, off));
        }
    }
    None
}

/// Ray-structured ring between the buffer circle and a circle with three flats.
pub fn ring_mesh() -> Result<Mesh> {
    let r_outer = FLAT_DISTANCE / FLAT_HALF_ANGLE.to_radians().cos();
    let mut nodes = Vec::new();
    for k in 0..=RING_LAYERS {
        let s = k as f64 / RING_LAYERS as f64;
        for i in 0..N_THETA {
            let alpha = std::f64::consts::TAU * i as f64 / N_THETA as f64;
            let (dir_x, dir_y) = (alpha.cos(), alpha.sin());
            let p = match flat_offset(i) {
                Some((b, off)) if k == RING_LAYERS => {
                    // exact point on the flat line, parametrized along the flat
                    let c = flat_center_deg(b).to_radians();
                    let t = FLAT_DISTANCE * off.to_radians().tan();
                    [FLAT_DISTANCE * c.cos() - t * c.sin(), FLAT_DISTANCE * c.sin() + t * c.cos()]
                }
                found => {
                    let r_out = match found {
                        Some((_, off)) => FLAT_DISTANCE / off.to_radians().cos(),
                        None => r_outer,
                    };
                    let r = RING_INNER + (r_out - RING_INNER) * s;
                    if k == 0 {
                        [RING_INNER * dir_x, RING_INNER * dir_y]
                    } else {
                        [r * dir_x, r * dir_y]
                    }
                }
            };
            nodes.push(p);
        }
    }
    let outer0 = RING_LAYERS * N_THETA;
    let mut edges = loop_edges(0, N_THETA, TAG_PORT);
    for i in 0..N_THETA {
        let j = (i + 1) % N_THETA;
        let on_flat = matches!((flat_offset(i), flat_offset(j)), (Some((a, _)), Some((b, _))) if a == b);
        edges.push(BoundaryEdge {
            nodes: [outer0 + i, outer0 + j],
            tag: if on_flat { TAG_PORT } else { TAG_FREE },
        });
    }
    let mut ports = vec![(
        "inner".to_string(),
        (0..N_THETA).collect::<Vec<_>>(),
        PortGeometry::Arc { center: [0.0, 0.0], radius: RING_INNER },
    )];
    for b in 0..3 {
        let ids: Vec<usize> = (0..N_THETA)
            .filter(|&i| matches!(flat_offset(i), Some((bb, _)) if bb == b))
            .map(|i| outer0 + i)
            .collect();
        ports.push((format!("blade{b}"), ids, PortGeometry::Straight));
    }
    Ok(Mesh::new(nodes, periodic_layers(RING_LAYERS, N_THETA), edges, ports)?)
}

/// Root node abscissae of a blade in its own frame (root on `y = 0`).
pub fn root_abscissae() -> Vec<f64> {
    let n = (2.0 * FLAT_HALF_ANGLE / (360.0 / N_THETA as f64)).round() as usize;
    (0..=n)
        .map(|j| FLAT_DISTANCE * (-FLAT_HALF_ANGLE + j as f64 * 360.0 / N_THETA as f64).to_radians().tan())
        .collect()
}

/// Blade along `+y`; the standard resolution doubles the row three times above
/// the root with 2:1 transition rows.
pub fn blade_mesh(resolution: Resolution) -> Result<Mesh> {
    let root = root_abscissae();
    let refinements = match resolution {
        Resolution::Coarse => 0,
        Resolution::Standard => 3,
    };
    let mut nodes: Vec<Point> = root.iter().map(|&x| [x, 0.0]).collect();
    let mut tris = Vec::new();
    let mut row: Vec<usize> = (0..root.len()).collect();
    let mut xs = root.clone();
    let mut y = 0.0;
    for _ in 0..refinements {
        let mut fine_x = Vec::with_capacity(2 * xs.len() - 1);
        for k in 0..xs.len() {
            fine_x.push(xs[k]);
            if k + 1 < xs.len() {
                fine_x.push(0.5 * (xs[k] + xs[k + 1]));
            }
        }
        let h = 0.5 * (xs[1] - xs[0]);
        y += h;
        let fine: Vec<usize> = (0..fine_x.len()).map(|k| nodes.len() + k).collect();
        nodes.extend(fine_x.iter().map(|&x| [x, y]));
        for k in 0..row.len() - 1 {
            let (c0, c1) = (row[k], row[k + 1]);
            let (f0, f1, f2) = (fine[2 * k], fine[2 * k + 1], fine[2 * k + 2]);
            tris.push(Triangle { nodes: [c0, f1, f0], region: 0 });
            tris.push(Triangle { nodes: [c0, c1, f1], region: 0 });
            tris.push(Triangle { nodes: [c1, f2, f1], region: 0 });
        }
        row = fine;
        xs = fine_x;
    }
    let h = (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64;
    let n_rows = ((BLADE_LENGTH - y) / h).round().max(1.0) as usize;
    let dy = (BLADE_LENGTH - y) / n_rows as f64;
    for r in 1..=n_rows {
        let yy = if r == n_rows { BLADE_LENGTH } else { y + r as f64 * dy };
        let next: Vec<usize> = (0..xs.len()).map(|k| nodes.len() + k).collect();
        nodes.extend(xs.iter().map(|&x| [x, yy]));
        for k in 0..xs.len() - 1 {
            let (a, b, c, d) = (row[k], row[k + 1], next[k + 1], next[k]);
            if (k + r) % 2 == 0 {
                tris.push(Triangle { nodes: [a, b, c], region: 0 });
                tris.push(Triangle { nodes: [a, c, d], region: 0 });
            } else {
                tris.push(Triangle { nodes: [a, b, d], region: 0 });
                tris.push(Triangle { nodes: [b, c, d], region: 0 });
            }
        }
        row = next;
    }
    let probe = Mesh {
        nodes: nodes.clone(),
        triangles: tris.clone(),
        boundary_edges: vec![],
        ports: vec![],
    };
    let n_root = root.len();
    let mut edges: Vec<BoundaryEdge> = probe
        .topological_boundary()
        .into_iter()
        .map(|(a, b)| BoundaryEdge {
            nodes: [a, b],
            tag: if a < n_root && b < n_root { TAG_PORT } else { TAG_FREE },
        })
        .collect();
    edges.sort_by_key(|e| e.nodes);
    Ok(Mesh::new(
        nodes,
        tris,
        edges,
        vec![("root".into(), (0..n_root).collect(), PortGeometry::Straight)],
    )?)
}

/// Training manifest with mesh paths relative to the scenario directory.
pub fn manifest(port_modes: PortModeKind) -> TrainingManifest {
    let spec = |id: &str| ArchetypeSpec {
        id: id.to_string(),
        mesh: PathBuf::from(format!("meshes/{id}.json")),
        domain: DOMAIN,
        clamped_tags: vec![],
        port_modes,
        adaptive_port: None,
        reference_poisson_ratio: None,
    };
    let mut ring = spec("ring");
    ring.adaptive_port = Some("inner".into());
    ring.reference_poisson_ratio = Some(STEEL.poisson_ratio);
    TrainingManifest {
        archetypes: vec![spec("hub"), ring, spec("blade")],
        rb: GreedyOptions::default(),
        train_rb: true,
    }
}

/// Hub clamped at its hole, ring at angle 0, blades following the ring.
pub fn system_config() -> SystemConfig {
    let mut instances = vec![
        InstanceSpec {
            name: Some("hub".into()),
            archetype: "hub".into(),
            translate: [0.0, 0.0],
            rotate: 0.0,
            material: STEEL,
            adaptive_theta: None,
            follows: None,
        },
        InstanceSpec {
            name: Some("ring".into()),
            archetype: "ring".into(),
            translate: [0.0, 0.0],
            rotate: 0.0,
            material: STEEL,
            adaptive_theta: Some(0.0),
            follows: None,
        },
    ];
    let mut connections = vec![[("hub".to_string(), "rim".to_string()), ("ring".to_string(), "inner".to_string())]];
    for b in 0..3 {
        let c = flat_center_deg(b).to_radians();
        instances.push(InstanceSpec {
            name: Some(format!("blade{b}")),
            archetype: "blade".into(),
            translate: [FLAT_DISTANCE * c.cos(), FLAT_DISTANCE * c.sin()],
            rotate: flat_center_deg(b) - 90.0,
            material: COMPOSITE,
            adaptive_theta: None,
            follows: Some("ring".into()),
        });
        connections.push([("ring".to_string(), format!("blade{b}")), (format!("blade{b}"), "root".to_string())]);
    }
    SystemConfig {
        instances,
        connections,
        clamped: vec![("hub".into(), "base".into())],
        gravity: GRAVITY,
    }
}

pub fn build(resolution: Resolution, port_modes: PortModeKind) -> Result<Scenario> {
    Ok(Scenario {
        hub: hub_mesh()?,
        ring: ring_mesh()?,
        blade: blade_mesh(resolution)?,
        manifest: manifest(port_modes),
        system: system_config(),
    })
}

impl Scenario {
    pub fn mesh(&self, id: &str) -> Option<&Mesh> {
        match id {
            "hub" => Some(&self.hub),
            "ring" => Some(&self.ring),
            "blade" => Some(&self.blade),
            _ => None,
        }
    }

    /// Trains the library in memory.
    pub fn train(&self, overrides: TrainOverrides, train_rb: bool) -> Result<Library> {
        let mut options = self.manifest.rb;
        if let Some(tol) = overrides.rb_tol {
            options.tol = tol;
        }
        let mut lib = Library::new();
        for spec in &self.manifest.archetypes {
            let mut spec = spec.clone();
            if let Some(kind) = overrides.port_modes {
                spec.port_modes = kind;
            }
            let mesh = self.mesh(&spec.id).expect("scenario mesh").clone();
            lib.insert(TrainedArchetype::train(&spec, mesh, &options, train_rb)?);
        }
        Ok(lib)
    }

    /// Writes `meshes/*.json`, `manifest.json` and `system.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let meshes = dir.join("meshes");
        std::fs::create_dir_all(&meshes).map_err(|e| Error::io(&meshes, e))?;
        for id in ["hub", "ring", "blade"] {
            save_mesh(self.mesh(id).unwrap(), &meshes.join(format!("{id}.json")))?;
        }
        let m = dir.join("manifest.json");
        std::fs::write(&m, self.manifest.to_json_string()).map_err(|e| Error::io(&m, e))?;
        let s = dir.join("system.json");
        std::fs::write(&s, self.system.to_json_string()).map_err(|e| Error::io(&s, e))?;
        Ok(())
    }
}
