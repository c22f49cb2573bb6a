use std::f64::consts::{PI, TAU};

use apcms_core::mesh::shapes::{annulus, rectangle, rectangle_side, with_ports, Side};
use apcms_core::mesh::{
    generate_buffer, merge_conforming, min_angle, min_triangle_angle, rotate_mesh, rotate_point, signed_area, BoundaryEdge,
    BufferKind, BufferSpec, Mesh, MeshError, Point, PortGeometry, Triangle,
};
use proptest::prelude::*;

fn polygon(n: usize, r: f64, phase: f64) -> Vec<Point> {
    (0..n)
        .map(|k| {
            let a = phase + TAU * k as f64 / n as f64;
            [r * a.cos(), r * a.sin()]
        })
        .collect()
}

fn polygon_area(p: &[Point]) -> f64 {
    (0..p.len())
        .map(|k| {
            let (a, b) = (p[k], p[(k + 1) % p.len()]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        * 0.5
}

fn ring_buffer(n_in: usize, n_out: usize, r_in: f64, r_out: f64, phase: f64) -> Result<Mesh, MeshError> {
    generate_buffer(&BufferSpec {
        inner: polygon(n_in, r_in, 0.0),
        outer: polygon(n_out, r_out, phase),
        kind: BufferKind::Annulus,
        inner_geometry: PortGeometry::Arc { center: [0.0, 0.0], radius: r_in },
        outer_geometry: PortGeometry::Arc { center: [0.0, 0.0], radius: r_out },
    })
}

fn square_with_port(lo: Point, n: usize, side: Side, name: &str) -> Mesh {
    let m = rectangle(lo, [lo[0] + 1.0, lo[1] + 1.0], n, n);
    with_ports(m, vec![(name.into(), rectangle_side(n, n, side), PortGeometry::Straight)]).unwrap()
}

#[test]
fn reference_triangle_has_half_unit_area() {
    let m = Mesh::new(
        vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        vec![Triangle { nodes: [0, 1, 2], region: 0 }],
        vec![],
        vec![],
    )
    .unwrap();
    assert!((m.total_area() - 0.5).abs() < 1e-15);
}

#[test]
fn clockwise_input_is_stored_counter_clockwise() {
    let m = Mesh::new(
        vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        vec![Triangle { nodes: [0, 2, 1], region: 0 }],
        vec![],
        vec![],
    )
    .unwrap();
    let [a, b, c] = m.triangle_points(0);
    assert!(signed_area(a, b, c) > 0.0);
}

#[test]
fn zero_area_triangle_is_rejected() {
    let r = Mesh::new(
        vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
        vec![Triangle { nodes: [0, 1, 2], region: 0 }],
        vec![BoundaryEdge { nodes: [0, 1], tag: 1 }],
        vec![],
    );
    assert!(matches!(r, Err(MeshError::DegenerateTriangle { .. })));
}

#[test]
fn quarter_turn_maps_x_axis_to_y_axis() {
    let p = rotate_point([1.0, 0.0], [0.0, 0.0], PI / 2.0);
    assert!(p[0].abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15);
}

#[test]
fn min_angle_of_known_triangles() {
    let eq = min_triangle_angle([[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]]);
    assert!((eq - 60.0).abs() < 1e-12);
    let right = min_triangle_angle([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    assert!((right - 45.0).abs() < 1e-12);
    let needle = min_triangle_angle([[0.0, 0.0], [1.0, 0.0], [0.5, 1e-6]]);
    assert!(needle < 0.01);
}

#[test]
fn concentric_octagons_give_sixteen_triangles() {
    let m = ring_buffer(8, 8, 1.0, 1.2, 0.0).unwrap();
    assert_eq!(m.triangles.len(), 16);
    assert_eq!(m.ports.len(), 2);
}

#[test]
fn half_spacing_offset_is_well_shaped() {
    let m = ring_buffer(8, 8, 1.0, 1.3, PI / 8.0).unwrap();
    // law of cosines, independent of the library's angle routine
    let mut worst = 180.0f64;
    for t in 0..m.triangles.len() {
        let p = m.triangle_points(t);
        let side = |i: usize, j: usize| (p[i][0] - p[j][0]).hypot(p[i][1] - p[j][1]);
        let (a, b, c) = (side(1, 2), side(0, 2), side(0, 1));
        for (o, x, y) in [(a, b, c), (b, a, c), (c, a, b)] {
            worst = worst.min(((x * x + y * y - o * o) / (2.0 * x * y)).acos().to_degrees());
        }
    }
    assert!(worst >= 15.0, "min angle {worst}");
    assert!((worst - min_angle(&m)).abs() < 1e-9);
}

#[test]
fn closed_loops_may_be_given_outside_first() {
    let m = generate_buffer(&BufferSpec {
        inner: polygon(12, 1.3, 0.0),
        outer: polygon(10, 1.0, 0.1),
        kind: BufferKind::Annulus,
        inner_geometry: PortGeometry::Arc { center: [0.0, 0.0], radius: 1.3 },
        outer_geometry: PortGeometry::Arc { center: [0.0, 0.0], radius: 1.0 },
    })
    .unwrap();
    assert_eq!(m.triangles.len(), 22);
    let gap = polygon_area(&polygon(12, 1.3, 0.0)) - polygon_area(&polygon(10, 1.0, 0.1));
    assert!((m.total_area() - gap).abs() < 1e-12);
    assert_eq!(m.ports[0].name, "inner");
    assert_eq!(m.nodes[0], polygon(12, 1.3, 0.0)[0]);
}

#[test]
fn zero_thickness_buffer_is_an_error() {
    let r = ring_buffer(8, 8, 1.0, 1.0, 0.0);
    assert!(matches!(r, Err(MeshError::DegenerateBuffer { .. })), "{r:?}");
}

#[test]
fn merge_shares_port_nodes() {
    let a = square_with_port([0.0, 0.0], 3, Side::Right, "r");
    let b = square_with_port([1.0, 0.0], 3, Side::Left, "l");
    let m = merge_conforming(&[a.clone(), b.clone()], 1e-9).unwrap();
    assert_eq!(m.mesh.n_nodes(), a.n_nodes() + b.n_nodes() - 4);
    assert_eq!(m.mesh.triangles.len(), a.triangles.len() + b.triangles.len());
    for (k, &i) in rectangle_side(3, 3, Side::Right).iter().enumerate() {
        assert_eq!(m.node_maps[0][i], m.node_maps[1][rectangle_side(3, 3, Side::Left)[k]]);
    }
}

#[test]
fn shifted_grid_does_not_merge() {
    let a = square_with_port([0.0, 0.0], 3, Side::Right, "r");
    let b = square_with_port([1.0, 0.0], 4, Side::Left, "l");
    assert!(merge_conforming(&[a, b], 1e-9).is_err());
}

#[test]
fn merge_of_a_chain_is_associative() {
    let sq = |x: f64| {
        let m = rectangle([x, 0.0], [x + 1.0, 1.0], 2, 2);
        with_ports(
            m,
            vec![
                ("l".into(), rectangle_side(2, 2, Side::Left), PortGeometry::Straight),
                ("r".into(), rectangle_side(2, 2, Side::Right), PortGeometry::Straight),
            ],
        )
        .unwrap()
    };
    let (a, b, c) = (sq(0.0), sq(1.0), sq(2.0));
    let all = merge_conforming(&[a.clone(), b.clone(), c.clone()], 1e-9).unwrap();
    assert_eq!(all.mesh.n_nodes(), 3 * 9 - 2 * 3);
    let ab = merge_conforming(&[a, b], 1e-9).unwrap();
    let mut ab_mesh = ab.mesh.clone();
    ab_mesh.ports.retain(|p| p.nodes.iter().all(|&v| ab_mesh.nodes[v][0] > 1.5));
    let abc = merge_conforming(&[ab_mesh, c], 1e-9).unwrap();
    assert_eq!(abc.mesh.n_nodes(), all.mesh.n_nodes());
    assert!((abc.mesh.total_area() - all.mesh.total_area()).abs() < 1e-13);
}

#[test]
fn rotated_annulus_keeps_ports_on_their_circles() {
    let m = annulus(0.5, 1.0, 24, 2, "in", "out");
    let r = rotate_mesh(&m, [0.0, 0.0], 0.37);
    for p in &r.ports {
        let PortGeometry::Arc { radius, .. } = p.geometry else { panic!() };
        for &v in &p.nodes {
            let q = r.nodes[v];
            assert!((q[0].hypot(q[1]) - radius).abs() < 1e-14);
        }
    }
}

proptest! {
    #[test]
    fn rotations_compose(a in -7.0f64..7.0, b in -7.0f64..7.0, x in -3.0f64..3.0, y in -3.0f64..3.0) {
        let c = [0.3, -0.2];
        let two = rotate_point(rotate_point([x, y], c, a), c, b);
        let one = rotate_point([x, y], c, a + b);
        prop_assert!((two[0] - one[0]).abs() < 1e-12 && (two[1] - one[1]).abs() < 1e-12);
    }

    #[test]
    fn rigid_rotation_preserves_area_and_angles(theta in -PI..PI) {
        let m = rectangle([0.0, 0.0], [2.0, 1.0], 4, 3);
        let r = rotate_mesh(&m, [0.5, 0.5], theta);
        prop_assert!((r.total_area() - m.total_area()).abs() < 1e-12);
        prop_assert!((min_angle(&r) - min_angle(&m)).abs() < 1e-9);
    }

    #[test]
    fn buffer_tiles_the_annular_gap(n_in in 8usize..40, n_out in 8usize..40, phase in -PI..PI) {
        let (r_in, r_out) = (1.0, 1.15);
        let m = ring_buffer(n_in, n_out, r_in, r_out, phase).unwrap();
        prop_assert_eq!(m.triangles.len(), n_in + n_out);
        for t in 0..m.triangles.len() {
            let [a, b, c] = m.triangle_points(t);
            prop_assert!(signed_area(a, b, c) > 0.0);
        }
        let gap = polygon_area(&polygon(n_out, r_out, phase)) - polygon_area(&polygon(n_in, r_in, 0.0));
        prop_assert!((m.total_area() - gap).abs() < 1e-12);
    }
}
