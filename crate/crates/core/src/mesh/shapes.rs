//! Structured mesh generators.

use std::f64::consts::TAU;

use super::{BoundaryEdge, Mesh, MeshError, Point, PortGeometry, Triangle};

pub const TAG_BOTTOM: u32 = 1;
pub const TAG_RIGHT: u32 = 2;
pub const TAG_TOP: u32 = 3;
pub const TAG_LEFT: u32 = 4;

pub const TAG_INNER: u32 = 1;
pub const TAG_OUTER: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

/// `nx × ny` grid of the box `[lo, hi]`, two triangles per cell, no ports.
/// Boundary tags: bottom 1, right 2, top 3, left 4.
pub fn rectangle(lo: Point, hi: Point, nx: usize, ny: usize) -> Mesh {
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push([
                lo[0] + (hi[0] - lo[0]) * i as f64 / nx as f64,
                lo[1] + (hi[1] - lo[1]) * j as f64 / ny as f64,
            ]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            if (i + j) % 2 == 0 {
                triangles.push(Triangle { nodes: [a, b, c], region: 0 });
                triangles.push(Triangle { nodes: [a, c, d], region: 0 });
            } else {
                triangles.push(Triangle { nodes: [a, b, d], region: 0 });
                triangles.push(Triangle { nodes: [b, c, d], region: 0 });
            }
        }
    }
    let mut edges = Vec::new();
    for i in 0..nx {
        edges.push(BoundaryEdge { nodes: [id(i, 0), id(i + 1, 0)], tag: TAG_BOTTOM });
        edges.push(BoundaryEdge { nodes: [id(nx - i, ny), id(nx - i - 1, ny)], tag: TAG_TOP });
    }
    for j in 0..ny {
        edges.push(BoundaryEdge { nodes: [id(nx, j), id(nx, j + 1)], tag: TAG_RIGHT });
        edges.push(BoundaryEdge { nodes: [id(0, ny - j), id(0, ny - j - 1)], tag: TAG_LEFT });
    }
    Mesh::new(nodes, triangles, edges, vec![]).expect("structured rectangle is valid")
}

/// Node ids along one side of a [`rectangle`], in increasing coordinate.
pub fn rectangle_side(nx: usize, ny: usize, side: Side) -> Vec<usize> {
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    match side {
        Side::Bottom => (0..=nx).map(|i| id(i, 0)).collect(),
        Side::Top => (0..=nx).map(|i| id(i, ny)).collect(),
        Side::Left => (0..=ny).map(|j| id(0, j)).collect(),
        Side::Right => (0..=ny).map(|j| id(nx, j)).collect(),
    }
}

/// Re-validates `mesh` with additional ports.
pub fn with_ports(mesh: Mesh, ports: Vec<(String, Vec<usize>, PortGeometry)>) -> Result<Mesh, MeshError> {
    let mut all: Vec<(String, Vec<usize>, PortGeometry)> = mesh
        .ports
        .iter()
        .map(|p| (p.name.clone(), p.nodes.clone(), p.geometry))
        .collect();
    all.extend(ports);
    Mesh::new(mesh.nodes, mesh.triangles, mesh.boundary_edges, all)
}

/// Annulus centred at the origin with `n_theta` nodes per ring and `n_r`
/// radial layers, uniform in radius. Both circles become closed arc ports.
pub fn annulus(r_in: f64, r_out: f64, n_theta: usize, n_r: usize, inner: &str, outer: &str) -> Mesh {
    let radii: Vec<f64> = (0..=n_r).map(|k| r_in + (r_out - r_in) * k as f64 / n_r as f64).collect();
    annulus_with_radii(&radii, n_theta, inner, outer)
}

/// Annulus through the given increasing ring radii.
pub fn annulus_with_radii(radii: &[f64], n_theta: usize, inner: &str, outer: &str) -> Mesh {
    let n_r = radii.len() - 1;
    let id = |i: usize, k: usize| k * n_theta + (i % n_theta);
    let mut nodes = Vec::with_capacity(n_theta * radii.len());
    for &r in radii {
        for i in 0..n_theta {
            let a = TAU * i as f64 / n_theta as f64;
            nodes.push([r * a.cos(), r * a.sin()]);
        }
    }
    let mut triangles = Vec::new();
    for k in 0..n_r {
        for i in 0..n_theta {
            let (a, b, c, d) = (id(i, k), id(i + 1, k), id(i + 1, k + 1), id(i, k + 1));
            if (i + k) % 2 == 0 {
                triangles.push(Triangle { nodes: [a, b, c], region: 0 });
                triangles.push(Triangle { nodes: [a, c, d], region: 0 });
            } else {
                triangles.push(Triangle { nodes: [a, b, d], region: 0 });
                triangles.push(Triangle { nodes: [b, c, d], region: 0 });
            }
        }
    }
    let mut edges = Vec::new();
    for i in 0..n_theta {
        edges.push(BoundaryEdge { nodes: [id(i + 1, 0), id(i, 0)], tag: TAG_INNER });
        edges.push(BoundaryEdge { nodes: [id(i, n_r), id(i + 1, n_r)], tag: TAG_OUTER });
    }
    let ports = vec![
        (
            inner.to_string(),
            (0..n_theta).map(|i| id(i, 0)).collect(),
            PortGeometry::Arc { center: [0.0, 0.0], radius: radii[0] },
        ),
        (
            outer.to_string(),
            (0..n_theta).map(|i| id(i, n_r)).collect(),
            PortGeometry::Arc { center: [0.0, 0.0], radius: radii[n_r] },
        ),
    ];
    Mesh::new(nodes, triangles, edges, ports).expect("structured annulus is valid")
}
