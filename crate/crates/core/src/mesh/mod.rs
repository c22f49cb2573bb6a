//! Triangle meshes with named boundary port curves.

mod buffer;
mod merge;
pub mod shapes;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use buffer::{generate_buffer, zipper_loops, BufferKind, BufferSpec};
pub use merge::{merge_conforming, Merged};

pub type Point = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("mesh parse error: {0}")]
    Parse(String),
    #[error("index {index} out of range in {what}")]
    IndexOutOfRange { what: String, index: usize },
    #[error("triangle {index} has zero area")]
    DegenerateTriangle { index: usize },
    #[error("nodes {a} and {b} coincide (distance {distance:.3e})")]
    DuplicateNode { a: usize, b: usize, distance: f64 },
    #[error("port '{port}': node {node} is not on the mesh boundary")]
    PortNodeNotOnBoundary { port: String, node: usize },
    #[error("port '{port}': nodes {a} and {b} do not share a boundary edge")]
    PortNotContiguous { port: String, a: usize, b: usize },
    #[error("port '{port}': node {node} is {distance:.3e} away from its arc")]
    ArcNodeOffCircle { port: String, node: usize, distance: f64 },
    #[error("port '{port}': node ordering is not monotone along the curve")]
    NonMonotonePort { port: String },
    #[error("port '{port}' needs at least two nodes")]
    PortTooShort { port: String },
    #[error("ports '{a}' and '{b}' share node {node}")]
    PortOverlap { a: String, b: String, node: usize },
    #[error("duplicate port name '{0}'")]
    DuplicatePortName(String),
    #[error("boundary edge {index} is not on the mesh boundary")]
    InteriorBoundaryEdge { index: usize },
    #[error("empty mesh")]
    Empty,
    #[error("buffer loops need at least {needed} nodes each (got {inner} and {outer})")]
    BufferTooSmall { needed: usize, inner: usize, outer: usize },
    #[error("degenerate buffer: loop thickness {thickness:.3e}")]
    DegenerateBuffer { thickness: f64 },
    #[error("buffer triangulation failed: {0}")]
    SelfIntersecting(String),
    #[error("unmatched port node: {0}")]
    UnmatchedPortNode(String),
}

impl MeshError {
    /// Failures of an algorithm on valid input, as opposed to invalid input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, MeshError::SelfIntersecting(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PortGeometry {
    Straight,
    Arc { center: Point, radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortCurve {
    pub name: String,
    pub nodes: Vec<usize>,
    pub geometry: PortGeometry,
    /// The last node connects back to the first through a boundary edge.
    pub closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub nodes: [usize; 3],
    pub region: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub tag: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<Point>,
    pub triangles: Vec<Triangle>,
    pub boundary_edges: Vec<BoundaryEdge>,
    pub ports: Vec<PortCurve>,
}

pub fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Interior angles of a triangle in degrees.
pub fn triangle_angles(p: [Point; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for k in 0..3 {
        let a = p[k];
        let b = p[(k + 1) % 3];
        let c = p[(k + 2) % 3];
        let u = [b[0] - a[0], b[1] - a[1]];
        let v = [c[0] - a[0], c[1] - a[1]];
        let cross = u[0] * v[1] - u[1] * v[0];
        let dot = u[0] * v[0] + u[1] * v[1];
        out[k] = cross.abs().atan2(dot).to_degrees();
    }
    out
}

pub fn min_triangle_angle(p: [Point; 3]) -> f64 {
    let a = triangle_angles(p);
    a[0].min(a[1]).min(a[2])
}

/// Rotation of a point about `center` by `theta` radians.
pub fn rotate_point(p: Point, center: Point, theta: f64) -> Point {
    let (s, c) = theta.sin_cos();
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    [center[0] + c * dx - s * dy, center[1] + s * dx + c * dy]
}

/// Rotation that keeps a point exactly at its own distance from an arc
/// center by rotating its polar angle.
fn rotate_on_arc(p: Point, arc_center: Point, new_center: Point, theta: f64) -> Point {
    let dx = p[0] - arc_center[0];
    let dy = p[1] - arc_center[1];
    let r = dx.hypot(dy);
    let angle = dy.atan2(dx) + theta;
    let (s, c) = angle.sin_cos();
    [new_center[0] + r * c, new_center[1] + r * s]
}

/// Rigid placement `p ↦ R(angle)·p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Placement {
    pub angle: f64,
    pub translation: Point,
}

impl Placement {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn apply(&self, p: Point) -> Point {
        let r = rotate_point(p, [0.0, 0.0], self.angle);
        [r[0] + self.translation[0], r[1] + self.translation[1]]
    }

    /// Rotates a displacement-like vector (no translation).
    pub fn apply_vector(&self, v: Point) -> Point {
        rotate_point(v, [0.0, 0.0], self.angle)
    }
}

impl Mesh {
    /// Builds and validates a mesh. Clockwise triangles are reordered.
    pub fn new(
        nodes: Vec<Point>,
        triangles: Vec<Triangle>,
        boundary_edges: Vec<BoundaryEdge>,
        ports: Vec<(String, Vec<usize>, PortGeometry)>,
    ) -> Result<Self, MeshError> {
        let mut mesh = Mesh {
            nodes,
            triangles,
            boundary_edges,
            ports: ports
                .into_iter()
                .map(|(name, nodes, geometry)| PortCurve {
                    name,
                    nodes,
                    geometry,
                    closed: false,
                })
                .collect(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.nodes.len()
    }

    pub fn port(&self, name: &str) -> Option<(usize, &PortCurve)> {
        self.ports.iter().enumerate().find(|(_, p)| p.name == name)
    }

    pub fn port_index(&self, name: &str) -> Option<usize> {
        self.port(name).map(|(i, _)| i)
    }

    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        let n = self.triangles[t].nodes;
        [self.nodes[n[0]], self.nodes[n[1]], self.nodes[n[2]]]
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let p = self.triangle_points(t);
                signed_area(p[0], p[1], p[2])
            })
            .sum()
    }

    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.nodes {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        if self.nodes.is_empty() {
            return 0.0;
        }
        let (lo, hi) = self.bounding_box();
        distance(lo, hi)
    }

    /// Edges used by exactly one triangle, keyed by sorted node pair.
    pub fn topological_boundary(&self) -> HashSet<(usize, usize)> {
        let mut count: HashMap<(usize, usize), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let a = t.nodes[k];
                let b = t.nodes[(k + 1) % 3];
                *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        count.into_iter().filter(|&(_, c)| c == 1).map(|(e, _)| e).collect()
    }

    pub fn boundary_tags(&self) -> Vec<u32> {
        let mut tags: Vec<u32> = self.boundary_edges.iter().map(|e| e.tag).collect();
        tags.sort_unstable();
        tags.dedup();
        tags
    }

    /// Nodes touched by boundary edges carrying any of `tags`.
    pub fn nodes_with_tags(&self, tags: &[u32]) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .boundary_edges
            .iter()
            .filter(|e| tags.contains(&e.tag))
            .flat_map(|e| e.nodes)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn validate(&mut self) -> Result<(), MeshError> {
        if self.nodes.is_empty() || self.triangles.is_empty() {
            return Err(MeshError::Empty);
        }
        let n = self.nodes.len();
        let diag = self.bbox_diagonal();
        for (i, t) in self.triangles.iter_mut().enumerate() {
            for &v in &t.nodes {
                if v >= n {
                    return Err(MeshError::IndexOutOfRange {
                        what: format!("triangle {i}"),
                        index: v,
                    });
                }
            }
            let p = [self.nodes[t.nodes[0]], self.nodes[t.nodes[1]], self.nodes[t.nodes[2]]];
            let area = signed_area(p[0], p[1], p[2]);
            let scale = distance(p[0], p[1]).max(distance(p[1], p[2])).max(distance(p[2], p[0]));
            if !(area.abs() > 1e-14 * scale * scale) {
                return Err(MeshError::DegenerateTriangle { index: i });
            }
            if area < 0.0 {
                t.nodes.swap(1, 2);
            }
        }
        check_duplicates(&self.nodes, 1e-9 * diag)?;

        let boundary = self.topological_boundary();
        for (i, e) in self.boundary_edges.iter().enumerate() {
            let (a, b) = (e.nodes[0], e.nodes[1]);
            if a >= n || b >= n {
                return Err(MeshError::IndexOutOfRange {
                    what: format!("boundary edge {i}"),
                    index: a.max(b),
                });
            }
            if !boundary.contains(&(a.min(b), a.max(b))) {
                return Err(MeshError::InteriorBoundaryEdge { index: i });
            }
        }
        let boundary_nodes: HashSet<usize> = boundary.iter().flat_map(|&(a, b)| [a, b]).collect();

        let mut owner: HashMap<usize, usize> = HashMap::new();
        let mut names = HashSet::new();
        for pi in 0..self.ports.len() {
            let port = &self.ports[pi];
            if !names.insert(port.name.clone()) {
                return Err(MeshError::DuplicatePortName(port.name.clone()));
            }
            if port.nodes.len() < 2 {
                return Err(MeshError::PortTooShort { port: port.name.clone() });
            }
            for &v in &port.nodes {
                if v >= n {
                    return Err(MeshError::IndexOutOfRange {
                        what: format!("port '{}'", port.name),
                        index: v,
                    });
                }
                if !boundary_nodes.contains(&v) {
                    return Err(MeshError::PortNodeNotOnBoundary {
                        port: port.name.clone(),
                        node: v,
                    });
                }
                if let Some(&other) = owner.get(&v) {
                    return Err(MeshError::PortOverlap {
                        a: self.ports[other].name.clone(),
                        b: port.name.clone(),
                        node: v,
                    });
                }
                owner.insert(v, pi);
            }
            for w in port.nodes.windows(2) {
                if !boundary.contains(&(w[0].min(w[1]), w[0].max(w[1]))) {
                    return Err(MeshError::PortNotContiguous {
                        port: port.name.clone(),
                        a: w[0],
                        b: w[1],
                    });
                }
            }
            let first = port.nodes[0];
            let last = *port.nodes.last().unwrap();
            let closed = port.nodes.len() >= 3 && boundary.contains(&(first.min(last), first.max(last)));
            let points: Vec<Point> = port.nodes.iter().map(|&v| self.nodes[v]).collect();
            check_port_geometry(&port.name, &port.nodes, &points, &port.geometry, closed)?;
            self.ports[pi].closed = closed;
        }
        Ok(())
    }

    /// Port node positions in port order.
    pub fn port_points(&self, port: usize) -> Vec<Point> {
        self.ports[port].nodes.iter().map(|&v| self.nodes[v]).collect()
    }

    /// Interleaved DoF indices of a port's nodes.
    pub fn port_dofs(&self, port: usize) -> Vec<usize> {
        self.ports[port].nodes.iter().flat_map(|&v| [2 * v, 2 * v + 1]).collect()
    }

    pub fn with_region(mut self, region: u32) -> Self {
        for t in &mut self.triangles {
            t.region = region;
        }
        self
    }
}

fn check_duplicates(nodes: &[Point], tol: f64) -> Result<(), MeshError> {
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| nodes[a][0].total_cmp(&nodes[b][0]));
    for (k, &i) in order.iter().enumerate() {
        for &j in &order[k + 1..] {
            if nodes[j][0] - nodes[i][0] > tol {
                break;
            }
            let d = distance(nodes[i], nodes[j]);
            if d <= tol {
                return Err(MeshError::DuplicateNode {
                    a: i.min(j),
                    b: i.max(j),
                    distance: d,
                });
            }
        }
    }
    Ok(())
}

fn check_port_geometry(
    name: &str,
    ids: &[usize],
    points: &[Point],
    geometry: &PortGeometry,
    closed: bool,
) -> Result<(), MeshError> {
    match *geometry {
        PortGeometry::Arc { center, radius } => {
            for (k, p) in points.iter().enumerate() {
                let d = (distance(*p, center) - radius).abs();
                if d > 1e-9 * radius {
                    return Err(MeshError::ArcNodeOffCircle {
                        port: name.to_string(),
                        node: ids[k],
                        distance: d,
                    });
                }
            }
            let angle = |p: &Point| (p[1] - center[1]).atan2(p[0] - center[0]);
            let mut steps = Vec::with_capacity(points.len());
            for w in points.windows(2) {
                let mut d = angle(&w[1]) - angle(&w[0]);
                d -= (d / std::f64::consts::TAU).round() * std::f64::consts::TAU;
                steps.push(d);
            }
            let positive = steps.iter().all(|&d| d > 0.0);
            let negative = steps.iter().all(|&d| d < 0.0);
            let span: f64 = steps.iter().sum::<f64>().abs();
            if !(positive || negative) || span >= std::f64::consts::TAU {
                return Err(MeshError::NonMonotonePort { port: name.to_string() });
            }
        }
        PortGeometry::Straight => {
            if closed {
                return Err(MeshError::NonMonotonePort { port: name.to_string() });
            }
            let a = points[0];
            let b = *points.last().unwrap();
            let dir = [b[0] - a[0], b[1] - a[1]];
            let proj: Vec<f64> = points.iter().map(|p| (p[0] - a[0]) * dir[0] + (p[1] - a[1]) * dir[1]).collect();
            if !proj.windows(2).all(|w| w[1] > w[0]) {
                return Err(MeshError::NonMonotonePort { port: name.to_string() });
            }
        }
    }
    Ok(())
}

/// Minimum interior angle over all triangles, in degrees.
pub fn min_angle(mesh: &Mesh) -> f64 {
    (0..mesh.triangles.len())
        .map(|t| min_triangle_angle(mesh.triangle_points(t)))
        .fold(f64::INFINITY, f64::min)
}

fn transform_mesh(mesh: &Mesh, center: Point, theta: f64, translation: Point) -> Mesh {
    let mut out = mesh.clone();
    let shift = |p: Point| [p[0] + translation[0], p[1] + translation[1]];
    for (i, p) in mesh.nodes.iter().enumerate() {
        out.nodes[i] = shift(rotate_point(*p, center, theta));
    }
    for port in &mut out.ports {
        if let PortGeometry::Arc { center: c, radius } = port.geometry {
            let new_center = rotate_point(c, center, theta);
            for &v in &port.nodes {
                out.nodes[v] = shift(rotate_on_arc(mesh.nodes[v], c, new_center, theta));
            }
            port.geometry = PortGeometry::Arc {
                center: shift(new_center),
                radius,
            };
        }
    }
    out
}

/// Rigid rotation about `center`. Arc-port nodes are rotated through their
/// polar angle so they stay on their circle.
pub fn rotate_mesh(mesh: &Mesh, center: Point, theta: f64) -> Mesh {
    if theta == 0.0 {
        return mesh.clone();
    }
    transform_mesh(mesh, center, theta, [0.0, 0.0])
}

pub fn place_mesh(mesh: &Mesh, placement: &Placement) -> Mesh {
    if placement.angle == 0.0 && placement.translation == [0.0, 0.0] {
        return mesh.clone();
    }
    transform_mesh(mesh, [0.0, 0.0], placement.angle, placement.translation)
}

/// Positions the nodes of one port would take under `placement`, computed
/// exactly as [`place_mesh`] does.
pub fn placed_port_points(mesh: &Mesh, port: usize, placement: &Placement) -> Vec<Point> {
    let p = &mesh.ports[port];
    let translation = placement.translation;
    let shift = |q: Point| [q[0] + translation[0], q[1] + translation[1]];
    if placement.angle == 0.0 && translation == [0.0, 0.0] {
        return mesh.port_points(port);
    }
    match p.geometry {
        PortGeometry::Arc { center, .. } => {
            let nc = rotate_point(center, [0.0, 0.0], placement.angle);
            p.nodes
                .iter()
                .map(|&v| shift(rotate_on_arc(mesh.nodes[v], center, nc, placement.angle)))
                .collect()
        }
        PortGeometry::Straight => p
            .nodes
            .iter()
            .map(|&v| shift(rotate_point(mesh.nodes[v], [0.0, 0.0], placement.angle)))
            .collect(),
    }
}

#[derive(Serialize, Deserialize)]
struct PortJson {
    name: String,
    nodes: Vec<usize>,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    center: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct MeshJson {
    nodes: Vec<Point>,
    triangles: Vec<[u64; 4]>,
    boundary_edges: Vec<[u64; 3]>,
    #[serde(default)]
    ports: Vec<PortJson>,
}

impl Mesh {
    pub fn from_json_str(s: &str) -> Result<Self, MeshError> {
        let raw: MeshJson = serde_json::from_str(s).map_err(|e| MeshError::Parse(e.to_string()))?;
        let triangles = raw
            .triangles
            .iter()
            .map(|t| Triangle {
                nodes: [t[0] as usize, t[1] as usize, t[2] as usize],
                region: t[3] as u32,
            })
            .collect();
        let edges = raw
            .boundary_edges
            .iter()
            .map(|e| BoundaryEdge {
                nodes: [e[0] as usize, e[1] as usize],
                tag: e[2] as u32,
            })
            .collect();
        let mut ports = Vec::new();
        for p in raw.ports {
            let geometry = match p.kind.as_str() {
                "straight" => PortGeometry::Straight,
                "arc" => PortGeometry::Arc {
                    center: p
                        .center
                        .ok_or_else(|| MeshError::Parse(format!("arc port '{}' lacks a center", p.name)))?,
                    radius: p
                        .radius
                        .ok_or_else(|| MeshError::Parse(format!("arc port '{}' lacks a radius", p.name)))?,
                },
                other => return Err(MeshError::Parse(format!("unknown port kind '{other}'"))),
            };
            ports.push((p.name, p.nodes, geometry));
        }
        Mesh::new(raw.nodes, triangles, edges, ports)
    }

    pub fn to_json_string(&self) -> String {
        let raw = MeshJson {
            nodes: self.nodes.clone(),
            triangles: self
                .triangles
                .iter()
                .map(|t| [t.nodes[0] as u64, t.nodes[1] as u64, t.nodes[2] as u64, t.region as u64])
                .collect(),
            boundary_edges: self
                .boundary_edges
                .iter()
                .map(|e| [e.nodes[0] as u64, e.nodes[1] as u64, e.tag as u64])
                .collect(),
            ports: self
                .ports
                .iter()
                .map(|p| match p.geometry {
                    PortGeometry::Straight => PortJson {
                        name: p.name.clone(),
                        nodes: p.nodes.clone(),
                        kind: "straight".into(),
                        center: None,
                        radius: None,
                    },
                    PortGeometry::Arc { center, radius } => PortJson {
                        name: p.name.clone(),
                        nodes: p.nodes.clone(),
                        kind: "arc".into(),
                        center: Some(center),
                        radius: Some(radius),
                    },
                })
                .collect(),
        };
        serde_json::to_string(&raw).expect("mesh serialization cannot fail")
    }
}

pub fn load_mesh(path: &Path) -> crate::Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
    Mesh::from_json_str(&text).map_err(|e| match e {
        MeshError::Parse(reason) => crate::Error::parse(path, reason),
        other => other.into(),
    })
}

pub fn save_mesh(mesh: &Mesh, path: &Path) -> crate::Result<()> {
    std::fs::write(path, mesh.to_json_string()).map_err(|e| crate::Error::io(path, e))
}
