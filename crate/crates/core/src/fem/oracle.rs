//! Monolithic reference solve on the merged mesh of a whole system.

use std::time::Instant;

use super::{apply_dirichlet, assemble_direct, body_load, solve_spd, von_mises_with};
use crate::library::Library;
use crate::linalg::CscMatrix;
use crate::mesh::Merged;
use crate::synthesis::{Scene, System, Timing};
use crate::Result;

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub scene: Scene,
    pub merged: Merged,
    pub field: Vec<f64>,
    pub timing: Timing,
}

impl OracleSolution {
    pub fn von_mises(&self) -> Vec<f64> {
        von_mises_with(&self.merged.mesh, &self.field, |r| self.scene.material_of(r))
    }
}

/// Assembles the stiffness and load of every piece into the merged numbering.
pub fn assemble_scene(scene: &Scene, merged: &Merged) -> Result<(CscMatrix, Vec<f64>, Vec<usize>)> {
    let n = merged.mesh.n_dofs();
    let mut trips = Vec::new();
    let mut load = vec![0.0; n];
    let mut clamped = Vec::new();
    for (piece, map) in scene.pieces.iter().zip(&merged.node_maps) {
        let k = assemble_direct(&piece.mesh, piece.youngs_modulus, piece.poisson_ratio)?;
        let dof = |d: usize| 2 * map[d / 2] + d % 2;
        for c in 0..k.ncols() {
            for (r, v) in k.col(c) {
                trips.push((dof(r), dof(c), v));
            }
        }
        let f = body_load(&piece.mesh, piece.body_force);
        for (d, v) in f.into_iter().enumerate() {
            load[dof(d)] += v;
        }
        for &v in &piece.clamped_nodes {
            clamped.push(2 * map[v]);
            clamped.push(2 * map[v] + 1);
        }
    }
    clamped.sort_unstable();
    clamped.dedup();
    Ok((CscMatrix::from_triplets(n, n, &trips), load, clamped))
}

/// Builds buffers, merges all pieces, assembles and solves the full problem.
pub fn oracle_solve(system: &System, lib: &Library) -> Result<OracleSolution> {
    let t0 = Instant::now();
    let scene = system.scene(lib)?;
    let merged = scene.merge()?;
    let t_solve = Instant::now();
    let (k, f, clamped) = assemble_scene(&scene, &merged)?;
    let zeros = vec![0.0; clamped.len()];
    let reduced = apply_dirichlet(&k, &f, &clamped, &zeros);
    let x = solve_spd(&reduced.matrix, &reduced.load).map_err(|e| crate::Error::from(e).in_stage("monolithic solve"))?;
    let field = reduced.expand(&x);
    let solve_s = t_solve.elapsed().as_secs_f64();
    let timing = Timing {
        buffer_mesh_generation_s: scene.buffer_s,
        bubble_function_s: 0.0,
        solution_computation_s: solve_s,
        total_s: t0.elapsed().as_secs_f64(),
    };
    Ok(OracleSolution {
        scene,
        merged,
        field,
        timing,
    })
}
