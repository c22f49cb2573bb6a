//! Gluing of conforming meshes along coincident ports.

use std::collections::{HashMap, HashSet};

use super::{distance, BoundaryEdge, Mesh, MeshError, Point, PortCurve, Triangle};

#[derive(Debug, Clone)]
pub struct Merged {
    pub mesh: Mesh,
    /// `node_maps[k][v]` is the merged index of node `v` of input mesh `k`.
    pub node_maps: Vec<Vec<usize>>,
}

/// Uniform grid for coincident-point lookup.
struct PointHash {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl PointHash {
    fn new(cell: f64) -> Self {
        Self {
            cell,
            buckets: HashMap::new(),
        }
    }

    fn key(&self, p: Point) -> (i64, i64) {
        ((p[0] / self.cell).floor() as i64, (p[1] / self.cell).floor() as i64)
    }

    fn insert(&mut self, p: Point, id: usize) {
        let k = self.key(p);
        self.buckets.entry(k).or_default().push(id);
    }

    fn find(&self, p: Point, nodes: &[Point], tol: f64) -> Option<usize> {
        let (kx, ky) = self.key(p);
        let mut best: Option<(f64, usize)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(ids) = self.buckets.get(&(kx + dx, ky + dy)) {
                    for &id in ids {
                        let d = distance(nodes[id], p);
                        if d <= tol && best.map_or(true, |(bd, bid)| d < bd || (d == bd && id < bid)) {
                            best = Some((d, id));
                        }
                    }
                }
            }
        }
        best.map(|(_, id)| id)
    }
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    distance(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

fn on_polyline(p: Point, line: &[Point], closed: bool, tol: f64) -> bool {
    let n = line.len();
    let segs = if closed { n } else { n - 1 };
    (0..segs).any(|k| point_segment_distance(p, line[k], line[(k + 1) % n]) <= tol)
}

/// Merges meshes whose ports touch. Two ports of different meshes are in
/// contact when at least two nodes of one lie on the other's polyline; every
/// contact must then be a one-to-one node match within `tol`.
pub fn merge_conforming(meshes: &[Mesh], tol: f64) -> Result<Merged, MeshError> {
    if meshes.is_empty() {
        return Err(MeshError::Empty);
    }
    let cell = if tol > 0.0 { tol * 4.0 } else { 1e-12 };
    let mut nodes: Vec<Point> = Vec::new();
    let mut origin: Vec<usize> = Vec::new();
    let mut hash = PointHash::new(cell);
    let mut node_maps = Vec::with_capacity(meshes.len());
    for (k, m) in meshes.iter().enumerate() {
        let mut map = Vec::with_capacity(m.nodes.len());
        for &p in &m.nodes {
            match hash.find(p, &nodes, tol).filter(|&id| origin[id] != k) {
                Some(id) => map.push(id),
                None => {
                    let id = nodes.len();
                    nodes.push(p);
                    origin.push(k);
                    hash.insert(p, id);
                    map.push(id);
                }
            }
        }
        node_maps.push(map);
    }

    // Contact detection and one-to-one check between ports of different meshes.
    let mut glued: HashSet<(usize, usize)> = HashSet::new();
    for a in 0..meshes.len() {
        for b in (a + 1)..meshes.len() {
            for (pa, port_a) in meshes[a].ports.iter().enumerate() {
                let line_a = meshes[a].port_points(pa);
                for (pb, port_b) in meshes[b].ports.iter().enumerate() {
                    let line_b = meshes[b].port_points(pb);
                    let hits_ab = line_a.iter().filter(|&&p| on_polyline(p, &line_b, port_b.closed, tol)).count();
                    let hits_ba = line_b.iter().filter(|&&p| on_polyline(p, &line_a, port_a.closed, tol)).count();
                    if hits_ab < 2 && hits_ba < 2 {
                        continue;
                    }
                    let describe = || format!("mesh {a} port '{}' vs mesh {b} port '{}'", port_a.name, port_b.name);
                    if port_a.nodes.len() != port_b.nodes.len() {
                        return Err(MeshError::UnmatchedPortNode(format!(
                            "{}: {} vs {} nodes",
                            describe(),
                            port_a.nodes.len(),
                            port_b.nodes.len()
                        )));
                    }
                    let set_b: HashSet<usize> = port_b.nodes.iter().map(|&v| node_maps[b][v]).collect();
                    for &v in &port_a.nodes {
                        if !set_b.contains(&node_maps[a][v]) {
                            return Err(MeshError::UnmatchedPortNode(format!(
                                "{}: node {v} at ({:.6e}, {:.6e}) has no partner within {tol:.1e}",
                                describe(),
                                meshes[a].nodes[v][0],
                                meshes[a].nodes[v][1]
                            )));
                        }
                    }
                    glued.insert((a, pa));
                    glued.insert((b, pb));
                }
            }
        }
    }

    let mut triangles = Vec::new();
    for (k, m) in meshes.iter().enumerate() {
        for t in &m.triangles {
            triangles.push(Triangle {
                nodes: t.nodes.map(|v| node_maps[k][v]),
                region: t.region,
            });
        }
    }
    let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edges = Vec::new();
    for (k, m) in meshes.iter().enumerate() {
        for e in &m.boundary_edges {
            let n = e.nodes.map(|v| node_maps[k][v]);
            *edge_count.entry((n[0].min(n[1]), n[0].max(n[1]))).or_insert(0) += 1;
            edges.push(BoundaryEdge { nodes: n, tag: e.tag });
        }
    }
    edges.retain(|e| edge_count[&(e.nodes[0].min(e.nodes[1]), e.nodes[0].max(e.nodes[1]))] == 1);
    let mut ports: Vec<PortCurve> = Vec::new();
    for (k, m) in meshes.iter().enumerate() {
        for (p, port) in m.ports.iter().enumerate() {
            if !glued.contains(&(k, p)) {
                ports.push(PortCurve {
                    name: port.name.clone(),
                    nodes: port.nodes.iter().map(|&v| node_maps[k][v]).collect(),
                    geometry: port.geometry,
                    closed: port.closed,
                });
            }
        }
    }
    // Port names may repeat across inputs; the merged mesh keeps them as-is
    // and is not re-validated for name uniqueness.
    let mesh = Mesh {
        nodes,
        triangles,
        boundary_edges: edges,
        ports,
    };
    Ok(Merged { mesh, node_maps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes::{rectangle, rectangle_side, with_ports, Side};
    use crate::mesh::PortGeometry;

    fn square(x0: f64, n: usize, shift: f64) -> Mesh {
        let m = rectangle([x0, shift], [x0 + 1.0, 1.0 + shift], n, n);
        with_ports(
            m,
            vec![
                ("left".into(), rectangle_side(n, n, Side::Left), PortGeometry::Straight),
                ("right".into(), rectangle_side(n, n, Side::Right), PortGeometry::Straight),
            ],
        )
        .unwrap()
    }

    #[test]
    fn shared_edge_counted_once() {
        let a = square(0.0, 4, 0.0);
        let b = square(1.0, 4, 0.0);
        let m = merge_conforming(&[a.clone(), b.clone()], 1e-9).unwrap();
        assert_eq!(m.mesh.n_nodes(), a.n_nodes() + b.n_nodes() - 5);
        assert_eq!(m.mesh.ports.len(), 2);
        assert!((m.mesh.total_area() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn shifted_grid_is_rejected() {
        let a = square(0.0, 4, 0.0);
        let b = square(1.0, 4, 0.1);
        let err = merge_conforming(&[a, b], 1e-9).unwrap_err();
        assert!(matches!(err, MeshError::UnmatchedPortNode(_)));
    }

    #[test]
    fn chain_of_three() {
        let parts = [square(0.0, 3, 0.0), square(1.0, 3, 0.0), square(2.0, 3, 0.0)];
        let m = merge_conforming(&parts, 1e-9).unwrap();
        let total: usize = parts.iter().map(|p| p.n_nodes()).sum();
        assert_eq!(m.mesh.n_nodes(), total - 2 * 4);
    }
}
