//! Legacy ASCII VTK output of a displacement field and element stresses.

use std::fmt::Write as _;

use crate::mesh::Mesh;
use crate::{Error, Result};

/// Renders an unstructured grid with point vectors `displacement` and cell
/// scalars `von_mises`. Numbers carry 17 significant digits.
pub fn write_vtk(mesh: &Mesh, displacement: &[f64], von_mises: &[f64]) -> String {
    assert_eq!(displacement.len(), mesh.n_dofs());
    assert_eq!(von_mises.len(), mesh.triangles.len());
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\napcms field\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {} double", mesh.n_nodes());
    for p in &mesh.nodes {
        let _ = writeln!(s, "{:.16e} {:.16e} 0", p[0], p[1]);
    }
    let nt = mesh.triangles.len();
    let _ = writeln!(s, "CELLS {} {}", nt, 4 * nt);
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t.nodes[0], t.nodes[1], t.nodes[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        s.push_str("5\n");
    }
    let _ = writeln!(s, "POINT_DATA {}", mesh.n_nodes());
    s.push_str("VECTORS displacement double\n");
    for v in 0..mesh.n_nodes() {
        let _ = writeln!(s, "{:.16e} {:.16e} 0", displacement[2 * v], displacement[2 * v + 1]);
    }
    let _ = writeln!(s, "CELL_DATA {nt}");
    s.push_str("SCALARS von_mises double 1\nLOOKUP_TABLE default\n");
    for v in von_mises {
        let _ = writeln!(s, "{v:.16e}");
    }
    s
}

/// Contents of a file written by [`write_vtk`].
#[derive(Debug, Clone, PartialEq)]
pub struct VtkField {
    pub points: Vec<[f64; 2]>,
    pub cells: Vec<[usize; 3]>,
    pub displacement: Vec<f64>,
    pub von_mises: Vec<f64>,
}

pub fn read_vtk(text: &str) -> Result<VtkField> {
    let bad = |what: &str| Error::parse("<vtk>", what.to_string());
    let mut tokens = text.split_whitespace().peekable();
    let mut out = VtkField {
        points: vec![],
        cells: vec![],
        displacement: vec![],
        von_mises: vec![],
    };
    let num = |t: Option<&str>| -> Result<f64> {
        t.ok_or_else(|| bad("unexpected end of file"))?
            .parse::<f64>()
            .map_err(|e| bad(&e.to_string()))
    };
    let int = |t: Option<&str>| -> Result<usize> {
        t.ok_or_else(|| bad("unexpected end of file"))?
            .parse::<usize>()
            .map_err(|e| bad(&e.to_string()))
    };
    while let Some(tok) = tokens.next() {
        match tok {
            "POINTS" => {
                let n = int(tokens.next())?;
                tokens.next();
                for _ in 0..n {
                    let x = num(tokens.next())?;
                    let y = num(tokens.next())?;
                    num(tokens.next())?;
                    out.points.push([x, y]);
                }
            }
            "CELLS" => {
                let n = int(tokens.next())?;
                tokens.next();
                for _ in 0..n {
                    if int(tokens.next())? != 3 {
                        return Err(bad("only triangles are supported"));
                    }
                    out.cells.push([int(tokens.next())?, int(tokens.next())?, int(tokens.next())?]);
                }
            }
            "VECTORS" => {
                let name = tokens.next().unwrap_or_default();
                tokens.next();
                if name != "displacement" {
                    return Err(bad("expected displacement vectors"));
                }
                for _ in 0..out.points.len() {
                    out.displacement.push(num(tokens.next())?);
                    out.displacement.push(num(tokens.next())?);
                    num(tokens.next())?;
                }
            }
            "SCALARS" => {
                let name = tokens.next().unwrap_or_default();
                if name != "von_mises" {
                    return Err(bad("expected von_mises scalars"));
                }
                tokens.next();
                tokens.next();
                if tokens.next() != Some("LOOKUP_TABLE") {
                    return Err(bad("missing lookup table"));
                }
                tokens.next();
                for _ in 0..out.cells.len() {
                    out.von_mises.push(num(tokens.next())?);
                }
            }
            _ => {}
        }
    }
    if out.von_mises.len() != out.cells.len() || out.displacement.len() != 2 * out.points.len() {
        return Err(bad("incomplete field data"));
    }
    Ok(out)
}
