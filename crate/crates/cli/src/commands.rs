//! The operations behind each subcommand, usable without the binary.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use apcms_core::fem::oracle::{oracle_solve, OracleSolution};
use apcms_core::fem::von_mises_with;
use apcms_core::fem::vtk::{read_vtk, write_vtk};
use apcms_core::library::{Library, TrainOverrides, TrainingManifest};
use apcms_core::mesh::{merge_conforming, place_mesh, Merged, Mesh};
use apcms_core::synthesis::{
    instantiate, normalize_degrees, online_solve, BubbleSource, RomSolution, System, SystemConfig, Timing,
};
use apcms_core::{Error, Result};

use crate::metrics::{compare_fields, summarize, write_csv, MetricsRecord, StressErrors};

/// What a solve reports next to its fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub method: Method,
    pub theta: f64,
    pub n_sc: usize,
    pub fe_dofs: usize,
    pub timing: Timing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rom,
    Fe,
}

/// A field on the merged mesh of a system with its element stresses.
#[derive(Debug, Clone)]
pub struct MergedField {
    pub merged: Merged,
    pub displacement: Vec<f64>,
    pub von_mises: Vec<f64>,
}

impl MergedField {
    pub fn to_vtk(&self) -> String {
        write_vtk(&self.merged.mesh, &self.displacement, &self.von_mises)
    }
}

/// Reduced solve mapped onto the merged mesh the oracle uses.
#[derive(Debug, Clone)]
pub struct RomRun {
    pub system: System,
    pub solution: RomSolution,
    pub field: MergedField,
    pub info: RunInfo,
}

#[derive(Debug, Clone)]
pub struct OracleRun {
    pub solution: OracleSolution,
    pub field: MergedField,
    pub info: RunInfo,
}

pub fn train(manifest_path: &Path, library_dir: &Path, overrides: TrainOverrides) -> Result<Library> {
    let manifest = TrainingManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let lib = Library::train(&manifest, base, overrides)?;
    lib.save(library_dir)?;
    Ok(lib)
}

fn instantiate_at(config: &SystemConfig, lib: &Library, theta: f64) -> Result<(f64, System)> {
    let theta = normalize_degrees(theta);
    let system = instantiate(&config.with_theta(theta), lib).map_err(|e| e.in_stage("instantiate"))?;
    Ok((theta, system))
}

/// Merged mesh of the reduced solution's pieces, in the oracle's order:
/// instances, then buffers.
fn rom_field(system: &System, lib: &Library, rom: &RomSolution) -> Result<MergedField> {
    let mut meshes: Vec<Mesh> = Vec::with_capacity(system.instances.len() + rom.buffers.len());
    let mut materials = Vec::with_capacity(meshes.capacity());
    for (i, inst) in system.instances.iter().enumerate() {
        let arch = &lib.get(&inst.archetype)?.arch;
        meshes.push(place_mesh(&arch.mesh, &inst.placement).with_region(i as u32));
        materials.push((inst.youngs_modulus, inst.poisson_ratio));
    }
    for (link, (mesh, _)) in system.adaptive.iter().zip(&rom.buffers) {
        let region = meshes.len() as u32;
        meshes.push(mesh.clone().with_region(region));
        let rot = &system.instances[link.rotational];
        materials.push((rot.youngs_modulus, rot.poisson_ratio));
    }
    let scale = meshes
        .iter()
        .map(|m| {
            let (lo, hi) = m.bounding_box();
            m.bbox_diagonal().max(lo[0].abs().max(lo[1].abs()).max(hi[0].abs().max(hi[1].abs())))
        })
        .fold(1.0f64, f64::max);
    let merged = merge_conforming(&meshes, 1e-9 * scale)?;
    let displacement = rom.merged_field(&merged);
    let von_mises = von_mises_with(&merged.mesh, &displacement, |r| materials[r as usize]);
    Ok(MergedField {
        merged,
        displacement,
        von_mises,
    })
}

pub fn solve_rom(config: &SystemConfig, lib: &Library, theta: f64, source: BubbleSource) -> Result<RomRun> {
    let (theta, system) = instantiate_at(config, lib, theta)?;
    let solution = online_solve(&system, lib, source)?;
    let field = rom_field(&system, lib, &solution)?;
    let info = RunInfo {
        method: Method::Rom,
        theta,
        n_sc: system.table.n_sc,
        fe_dofs: field.merged.mesh.n_dofs(),
        timing: solution.timing,
    };
    Ok(RomRun {
        system,
        solution,
        field,
        info,
    })
}

pub fn solve_oracle(config: &SystemConfig, lib: &Library, theta: f64) -> Result<OracleRun> {
    let (theta, system) = instantiate_at(config, lib, theta)?;
    let solution = oracle_solve(&system, lib)?;
    let field = MergedField {
        merged: solution.merged.clone(),
        displacement: solution.field.clone(),
        von_mises: solution.von_mises(),
    };
    let info = RunInfo {
        method: Method::Fe,
        theta,
        n_sc: system.table.n_sc,
        fe_dofs: field.merged.mesh.n_dofs(),
        timing: solution.timing,
    };
    Ok(OracleRun { solution, field, info })
}

/// Writes `field.vtk`, `timing.csv` and `info.json` into `out`.
pub fn write_run(out: &Path, field: &MergedField, info: &RunInfo) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let vtk = out.join("field.vtk");
    std::fs::write(&vtk, field.to_vtk()).map_err(|e| Error::io(&vtk, e))?;
    write_csv(&out.join("timing.csv"), &[info.timing])?;
    let path = out.join("info.json");
    let json = serde_json::to_string_pretty(info).expect("info serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_info(dir: &Path) -> Result<RunInfo> {
    let path = dir.join("info.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))
}

/// Stress errors of the run in `a` against the reference run in `b`.
pub fn compare(a: &Path, b: &Path) -> Result<StressErrors> {
    let load = |dir: &Path| -> Result<_> {
        let path = dir.join("field.vtk");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        read_vtk(&text).map_err(|_| Error::parse(&path, "not a field written by apcms"))
    };
    compare_fields(&load(a)?, &load(b)?)
}

/// Compares two run directories and writes a one-row metrics CSV.
pub fn compare_to_csv(a: &Path, b: &Path, out: &Path) -> Result<MetricsRecord> {
    let errors = compare(a, b)?;
    let info = read_info(a)?;
    let record = MetricsRecord::new(info.theta, errors, info.n_sc, info.fe_dofs, &info.timing);
    write_csv(out, &[record])?;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub record: MetricsRecord,
    pub oracle: Timing,
}

/// Reduced solve, oracle solve and comparison at one angle; the fields are
/// written to `<out>/theta_<θ>/{rom,fe}`.
pub fn sweep_point(config: &SystemConfig, lib: &Library, theta: f64, source: BubbleSource, out: Option<&Path>) -> Result<SweepPoint> {
    let rom = solve_rom(config, lib, theta, source)?;
    let fe = solve_oracle(config, lib, theta)?;
    if let Some(out) = out {
        let dir = out.join(format!("theta_{}", rom.info.theta));
        write_run(&dir.join("rom"), &rom.field, &rom.info)?;
        write_run(&dir.join("fe"), &fe.field, &fe.info)?;
    }
    if rom.field.merged.mesh.triangles.len() != fe.field.merged.mesh.triangles.len() {
        return Err(Error::Config("reduced and oracle merged meshes differ".into()));
    }
    let errors = crate::metrics::stress_errors(&rom.field.von_mises, &fe.field.von_mises)?;
    Ok(SweepPoint {
        record: MetricsRecord::new(rom.info.theta, errors, rom.info.n_sc, rom.info.fe_dofs, &rom.info.timing),
        oracle: fe.info.timing,
    })
}

/// Runs every angle on a pool of `jobs` threads and writes `metrics.csv`
/// and `summary.csv`. Successful points are written even if others fail;
/// the first failure is then returned.
pub fn sweep(
    config: &SystemConfig,
    lib: &Library,
    thetas: &[f64],
    source: BubbleSource,
    out: &Path,
    jobs: usize,
) -> Result<Vec<SweepPoint>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    let results: Vec<Result<SweepPoint>> = pool.install(|| {
        thetas
            .par_iter()
            .map(|&t| sweep_point(config, lib, t, source, Some(out)).map_err(|e| e.in_stage(&format!("theta {t}"))))
            .collect()
    });
    let mut points = Vec::new();
    let mut first_error = None;
    for r in results {
        match r {
            Ok(p) => points.push(p),
            Err(e) => {
                log::error!("{e}");
                first_error.get_or_insert(e);
            }
        }
    }
    let records: Vec<MetricsRecord> = points.iter().map(|p| p.record).collect();
    let oracle: Vec<Timing> = points.iter().map(|p| p.oracle).collect();
    write_csv(&out.join("metrics.csv"), &records)?;
    write_csv(&out.join("summary.csv"), &summarize(&records, &oracle))?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(points),
    }
}

/// Parses a comma-separated list of angles in degrees.
pub fn parse_theta_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Error::Config(format!("invalid angle '{t}' in theta list"))))
        .collect()
}

pub fn load_inputs(library: &Path, system: &Path) -> Result<(Library, SystemConfig)> {
    Ok((Library::load(library)?, SystemConfig::load(system)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_list_parses_signed_angles() {
        assert_eq!(parse_theta_list("-90, -45,0,45 ,90").unwrap(), vec![-90.0, -45.0, 0.0, 45.0, 90.0]);
        assert!(parse_theta_list("0,x").is_err());
    }
}
