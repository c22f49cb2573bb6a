//! Constrained triangulation of the thin layer between two node loops.
//!
//! A zipper walks both loops at once. At every step it looks at the quad
//! formed by the current rung and the next node on each loop, picks the
//! diagonal whose two triangles have the larger minimum angle, emits the
//! triangle on the current rung and advances one side. No node is inserted,
//! so both loops are reproduced bit for bit.

use super::{distance, min_triangle_angle, signed_area, BoundaryEdge, Mesh, MeshError, Point, PortGeometry, Triangle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferKind {
    /// Two open polylines joined at both ends.
    Strip,
    /// Two closed loops, one inside the other.
    Annulus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferSpec {
    pub inner: Vec<Point>,
    pub outer: Vec<Point>,
    pub kind: BufferKind,
    pub inner_geometry: PortGeometry,
    pub outer_geometry: PortGeometry,
}

pub const TAG_BUFFER_INNER: u32 = 1;
pub const TAG_BUFFER_OUTER: u32 = 2;
pub const TAG_BUFFER_END: u32 = 3;

fn polygon_area(points: &[Point], ids: &[usize]) -> f64 {
    let n = ids.len();
    (0..n)
        .map(|k| {
            let a = points[ids[k]];
            let b = points[ids[(k + 1) % n]];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        * 0.5
}

fn loop_thickness(points: &[Point], inner: &[usize], outer: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for &i in inner {
        for &o in outer {
            best = best.min(distance(points[i], points[o]));
        }
    }
    best
}

/// Triangulates the region between two node loops given as index lists into
/// `points`. Returns counter-clockwise triangles. A closed pair yields
/// `n_inner + n_outer` triangles, an open pair `n_inner + n_outer − 2`.
/// Closed loops may be given in either nesting order.
pub fn zipper_loops(
    points: &[Point],
    inner: &[usize],
    outer: &[usize],
    closed: bool,
) -> Result<Vec<[usize; 3]>, MeshError> {
    let needed = if closed { 3 } else { 2 };
    if inner.len() < needed || outer.len() < needed {
        return Err(MeshError::BufferTooSmall {
            needed,
            inner: inner.len(),
            outer: outer.len(),
        });
    }
    let thickness = loop_thickness(points, inner, outer);
    if !(thickness > 0.0) {
        return Err(MeshError::DegenerateBuffer { thickness });
    }

    if closed && polygon_area(points, outer).abs() < polygon_area(points, inner).abs() {
        return zipper_loops(points, outer, inner, closed);
    }

    let ni = inner.len();
    let no = outer.len();
    let mut outer_seq: Vec<usize> = outer.to_vec();
    let sign;
    let expected_area;
    if closed {
        let a_in = polygon_area(points, inner);
        let a_out = polygon_area(points, outer);
        if a_in.signum() != a_out.signum() {
            outer_seq.reverse();
        }
        sign = a_in.signum();
        expected_area = a_out.abs() - a_in.abs();
        // start the outer walk at the node angularly closest to inner[0]
        let n = ni as f64;
        let c = inner.iter().fold([0.0, 0.0], |acc, &i| [acc[0] + points[i][0] / n, acc[1] + points[i][1] / n]);
        let angle = |p: Point| (p[1] - c[1]).atan2(p[0] - c[0]);
        let a0 = angle(points[inner[0]]);
        let start = (0..no)
            .min_by(|&x, &y| {
                let dx = wrapped(angle(points[outer_seq[x]]) - a0).abs();
                let dy = wrapped(angle(points[outer_seq[y]]) - a0).abs();
                dx.total_cmp(&dy)
            })
            .unwrap();
        outer_seq.rotate_left(start);
    } else {
        let p = |i: usize| points[i];
        let straight = distance(p(inner[0]), p(outer[0])) + distance(p(inner[ni - 1]), p(outer[no - 1]));
        let crossed = distance(p(inner[0]), p(outer[no - 1])) + distance(p(inner[ni - 1]), p(outer[0]));
        if crossed < straight {
            outer_seq.reverse();
        }
        let mut poly: Vec<usize> = inner.to_vec();
        poly.extend(outer_seq.iter().rev());
        let a = polygon_area(points, &poly);
        sign = -a.signum();
        expected_area = a.abs();
    }
    if sign == 0.0 || !(expected_area > 0.0) {
        return Err(MeshError::DegenerateBuffer { thickness });
    }

    let (steps_i, steps_o) = if closed { (ni, no) } else { (ni - 1, no - 1) };
    let valid = |t: [usize; 3]| sign * signed_area(points[t[0]], points[t[1]], points[t[2]]) > 0.0;
    let quality = |t: [usize; 3]| min_triangle_angle([points[t[0]], points[t[1]], points[t[2]]]);

    let mut tris = Vec::with_capacity(steps_i + steps_o);
    let (mut ci, mut cj) = (0usize, 0usize);
    while ci < steps_i || cj < steps_o {
        let i0 = inner[ci % ni];
        let i1 = inner[(ci + 1) % ni];
        let o0 = outer_seq[cj % no];
        let o1 = outer_seq[(cj + 1) % no];
        let advance_inner = [i0, o0, i1];
        let advance_outer = [i0, o0, o1];
        let take_inner = if ci < steps_i && cj < steps_o {
            let score = |a: [usize; 3], b: [usize; 3]| {
                if valid(a) && valid(b) {
                    quality(a).min(quality(b))
                } else {
                    -1.0
                }
            };
            let si = score(advance_inner, [i1, o0, o1]);
            let so = score(advance_outer, [i0, o1, i1]);
            if si >= 0.0 && si >= so {
                true
            } else if so >= 0.0 {
                false
            } else if valid(advance_inner) {
                true
            } else if valid(advance_outer) {
                false
            } else {
                return Err(MeshError::SelfIntersecting(format!(
                    "no valid triangle at inner step {ci}, outer step {cj}"
                )));
            }
        } else {
            ci < steps_i
        };
        let t = if take_inner { advance_inner } else { advance_outer };
        if !valid(t) {
            return Err(MeshError::SelfIntersecting(format!(
                "inverted triangle at inner step {ci}, outer step {cj}"
            )));
        }
        if take_inner {
            ci += 1;
        } else {
            cj += 1;
        }
        tris.push(if sign > 0.0 { t } else { [t[0], t[2], t[1]] });
    }

    let covered: f64 = tris
        .iter()
        .map(|t| signed_area(points[t[0]], points[t[1]], points[t[2]]))
        .sum();
    if (covered - expected_area).abs() > 1e-9 * expected_area {
        return Err(MeshError::SelfIntersecting(format!(
            "triangles cover {covered:.12e} of {expected_area:.12e}"
        )));
    }
    Ok(tris)
}

fn wrapped(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    a - (a / tau).round() * tau
}

/// Meshes the layer between two loops. Nodes are the inner loop followed by
/// the outer loop, copied exactly; ports are named `inner` and `outer`.
pub fn generate_buffer(spec: &BufferSpec) -> Result<Mesh, MeshError> {
    let ni = spec.inner.len();
    let no = spec.outer.len();
    let closed = spec.kind == BufferKind::Annulus;
    let mut points = spec.inner.clone();
    points.extend_from_slice(&spec.outer);
    let inner: Vec<usize> = (0..ni).collect();
    let outer: Vec<usize> = (ni..ni + no).collect();
    let tris = zipper_loops(&points, &inner, &outer, closed)?;
    let triangles: Vec<Triangle> = tris.iter().map(|&nodes| Triangle { nodes, region: 0 }).collect();

    let mut edges = Vec::new();
    let loop_edges = |ids: &[usize], tag: u32, edges: &mut Vec<BoundaryEdge>| {
        let n = ids.len();
        let count = if closed { n } else { n - 1 };
        for k in 0..count {
            edges.push(BoundaryEdge { nodes: [ids[k], ids[(k + 1) % n]], tag });
        }
    };
    loop_edges(&inner, TAG_BUFFER_INNER, &mut edges);
    loop_edges(&outer, TAG_BUFFER_OUTER, &mut edges);
    if !closed {
        let provisional = Mesh {
            nodes: points.clone(),
            triangles: triangles.clone(),
            boundary_edges: vec![],
            ports: vec![],
        };
        let mut ends: Vec<(usize, usize)> = provisional
            .topological_boundary()
            .into_iter()
            .filter(|&(a, b)| (a < ni) != (b < ni))
            .collect();
        ends.sort_unstable();
        for (a, b) in ends {
            edges.push(BoundaryEdge { nodes: [a, b], tag: TAG_BUFFER_END });
        }
    }
    Mesh::new(
        points,
        triangles,
        edges,
        vec![
            ("inner".to_string(), inner, spec.inner_geometry),
            ("outer".to_string(), outer, spec.outer_geometry),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::min_angle;

    fn ring(n: usize, r: f64, offset: f64) -> Vec<Point> {
        (0..n)
            .map(|k| {
                let a = std::f64::consts::TAU * (k as f64 + offset) / n as f64;
                [r * a.cos(), r * a.sin()]
            })
            .collect()
    }

    fn spec(inner: Vec<Point>, outer: Vec<Point>, r_in: f64, r_out: f64) -> BufferSpec {
        BufferSpec {
            inner,
            outer,
            kind: BufferKind::Annulus,
            inner_geometry: PortGeometry::Arc { center: [0.0, 0.0], radius: r_in },
            outer_geometry: PortGeometry::Arc { center: [0.0, 0.0], radius: r_out },
        }
    }

    #[test]
    fn concentric_octagons_give_sixteen_triangles() {
        let m = generate_buffer(&spec(ring(8, 1.0, 0.0), ring(8, 1.3, 0.0), 1.0, 1.3)).unwrap();
        assert_eq!(m.triangles.len(), 16);
    }

    #[test]
    fn half_offset_octagon_is_well_shaped() {
        let m = generate_buffer(&spec(ring(8, 1.0, 0.0), ring(8, 1.3, 0.5), 1.0, 1.3)).unwrap();
        assert_eq!(m.triangles.len(), 16);
        assert!(min_angle(&m) >= 15.0);
    }

    #[test]
    fn identical_loops_are_degenerate() {
        let err = generate_buffer(&spec(ring(8, 1.0, 0.0), ring(8, 1.0, 0.0), 1.0, 1.0)).unwrap_err();
        assert!(matches!(err, MeshError::DegenerateBuffer { .. }));
    }

    #[test]
    fn strip_between_mismatched_polylines() {
        let inner: Vec<Point> = (0..=4).map(|k| [k as f64 * 0.25, 0.0]).collect();
        let outer: Vec<Point> = (0..=6).map(|k| [1.0 - k as f64 / 6.0, 0.1]).collect();
        let s = BufferSpec {
            inner,
            outer,
            kind: BufferKind::Strip,
            inner_geometry: PortGeometry::Straight,
            outer_geometry: PortGeometry::Straight,
        };
        let m = generate_buffer(&s).unwrap();
        assert_eq!(m.triangles.len(), 5 + 7 - 2);
        assert!((m.total_area() - 0.1).abs() < 1e-12);
    }
}
