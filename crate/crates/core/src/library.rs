//! Training manifests and the on-disk trained library.
//!
//! Layout of a trained library directory:
//!
//! ```text
//! library.json                    schema_version, archetype ids
//! <id>/manifest.json              parameter domain, ports, mode counts, RB summary
//! <id>/mesh.json                  reference mesh
//! <id>/modes_<port>.f64           port modes, column-major little-endian f64
//! <id>/extensions.f64
//! <id>/rb_<k>.f64                 basis, two reduced terms, reduced right-hand sides
//! <id>/traces/<label>.csv         greedy error decay, `iteration,worst_mu,error`
//! ```
//!
//! Sparse factorizations are not serialized; rotational archetypes are
//! refactorized when a library is loaded.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::adaptive::RotationalSplit;
use crate::archetype::{Archetype, ParameterDomain, PortModeKind, PortSpace};
use crate::mesh::{load_mesh, Mesh};
use crate::rb::{targets, train_all, GreedyOptions, GreedyStatus, RbSpace, ReducedModel, Target, TraceRow};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// One archetype in a training manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeSpec {
    pub id: String,
    /// Mesh file, relative to the manifest.
    pub mesh: PathBuf,
    pub domain: ParameterDomain,
    #[serde(default)]
    pub clamped_tags: Vec<u32>,
    #[serde(default = "full_modes")]
    pub port_modes: PortModeKind,
    /// Port behind which a buffer layer is generated online.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptive_port: Option<String>,
    /// Poisson ratio at which a rotational main body is factorized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_poisson_ratio: Option<f64>,
}

fn full_modes() -> PortModeKind {
    PortModeKind::Full
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub archetypes: Vec<ArchetypeSpec>,
    #[serde(default)]
    pub rb: GreedyOptions,
    /// Train reduced bases for stationary archetypes.
    #[serde(default = "yes")]
    pub train_rb: bool,
}

impl TrainingManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Overrides applied on top of a manifest.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainOverrides {
    pub port_modes: Option<PortModeKind>,
    pub rb_tol: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RbData {
    pub spaces: Vec<RbSpace>,
    pub model: ReducedModel,
}

pub struct TrainedArchetype {
    pub spec: ArchetypeSpec,
    pub arch: Archetype,
    pub rb: Option<RbData>,
    pub rotational: Option<RotationalSplit>,
    pub rb_options: GreedyOptions,
}

impl std::fmt::Debug for TrainedArchetype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainedArchetype")
            .field("id", &self.arch.id)
            .field("modes", &self.arch.n_modes())
            .field("rb", &self.rb.as_ref().map(|r| r.model.dim()))
            .field("rotational", &self.rotational)
            .finish()
    }
}

impl TrainedArchetype {
    /// Builds port modes, extensions, reduced bases and the rotational split.
    pub fn train(spec: &ArchetypeSpec, mesh: Mesh, options: &GreedyOptions, train_rb: bool) -> Result<Self> {
        let stage = |e: Error| e.in_stage(&format!("archetype '{}'", spec.id));
        let arch = Archetype::build(&spec.id, mesh, spec.domain, spec.clamped_tags.clone(), spec.port_modes).map_err(stage)?;
        let rotational = match &spec.adaptive_port {
            Some(port) => {
                let nu0 = spec.reference_poisson_ratio.ok_or_else(|| {
                    stage(Error::Config("a rotational archetype needs reference_poisson_ratio".into()))
                })?;
                Some(RotationalSplit::build(&arch, port, nu0).map_err(stage)?)
            }
            None => None,
        };
        let rb = if rotational.is_none() && train_rb {
            let spaces = train_all(&arch, options).map_err(stage)?;
            let model = ReducedModel::build(&arch, &spaces).map_err(stage)?;
            Some(RbData { spaces, model })
        } else {
            None
        };
        Ok(Self {
            spec: spec.clone(),
            arch,
            rb,
            rotational,
            rb_options: *options,
        })
    }
}

#[derive(Debug, Default)]
pub struct Library {
    pub archetypes: BTreeMap<String, TrainedArchetype>,
}

#[derive(Serialize, Deserialize)]
struct LibraryIndex {
    schema_version: u32,
    archetypes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PortEntry {
    name: String,
    kind: PortModeKind,
    modes: usize,
    dofs: usize,
}

#[derive(Serialize, Deserialize)]
struct RbEntry {
    target: Target,
    label: String,
    dim: usize,
    status: GreedyStatus,
    rhs_terms: usize,
}

#[derive(Serialize, Deserialize)]
struct ArchetypeManifest {
    schema_version: u32,
    spec: ArchetypeSpec,
    n_dofs: usize,
    n_interior: usize,
    ports: Vec<PortEntry>,
    rb_options: GreedyOptions,
    rb: Option<Vec<RbEntry>>,
}

fn write_f64(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::parse(path, "length is not a multiple of 8 bytes"));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn mat_values(m: &Mat<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.ncols()).flat_map(move |j| (0..m.nrows()).map(move |i| m[(i, j)]))
}

fn take_mat(values: &[f64], at: &mut usize, nrows: usize, ncols: usize, path: &Path) -> Result<Mat<f64>> {
    let len = nrows * ncols;
    if *at + len > values.len() {
        return Err(Error::parse(path, "array shorter than its manifest says"));
    }
    let m = Mat::from_fn(nrows, ncols, |i, j| values[*at + j * nrows + i]);
    *at += len;
    Ok(m)
}

/// Greedy trace as CSV; `worst_mu` is written as `E:nu`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iteration,worst_mu,error\n");
    for r in trace {
        let _ = writeln!(s, "{},{:e}:{},{:e}", r.iteration, r.worst_e, r.worst_nu, r.error);
    }
    s
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Library {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, trained: TrainedArchetype) {
        self.archetypes.insert(trained.arch.id.clone(), trained);
    }

    pub fn get(&self, id: &str) -> Result<&TrainedArchetype> {
        self.archetypes
            .get(id)
            .ok_or_else(|| Error::MissingData(format!("archetype '{id}' is not in the library")))
    }

    /// Trains every archetype of a manifest; mesh paths are relative to `base`.
    pub fn train(manifest: &TrainingManifest, base: &Path, overrides: TrainOverrides) -> Result<Self> {
        let mut options = manifest.rb;
        if let Some(tol) = overrides.rb_tol {
            options.tol = tol;
        }
        let mut lib = Library::new();
        for spec in &manifest.archetypes {
            let mut spec = spec.clone();
            if let Some(kind) = overrides.port_modes {
                spec.port_modes = kind;
            }
            let mesh = load_mesh(&base.join(&spec.mesh)).map_err(|e| e.in_stage(&format!("archetype '{}'", spec.id)))?;
            log::info!("training archetype '{}' ({} DoFs)", spec.id, mesh.n_dofs());
            lib.insert(TrainedArchetype::train(&spec, mesh, &options, manifest.train_rb)?);
        }
        Ok(lib)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let index = LibraryIndex {
            schema_version: SCHEMA_VERSION,
            archetypes: self.archetypes.keys().cloned().collect(),
        };
        write_text(&dir.join("library.json"), &serde_json::to_string_pretty(&index).unwrap())?;
        for (id, t) in &self.archetypes {
            let adir = dir.join(id);
            create_dir(&adir)?;
            let arch = &t.arch;
            write_text(&adir.join("mesh.json"), &arch.mesh.to_json_string())?;
            let mut ports = Vec::new();
            for (j, space) in arch.port_spaces.iter().enumerate() {
                write_f64(&adir.join(format!("modes_{j}.f64")), mat_values(&space.modes))?;
                ports.push(PortEntry {
                    name: arch.mesh.ports[j].name.clone(),
                    kind: space.kind,
                    modes: space.count(),
                    dofs: space.port_dofs(),
                });
            }
            write_f64(&adir.join("extensions.f64"), mat_values(&arch.extensions))?;
            let rb = match &t.rb {
                Some(rb) => {
                    let tdir = adir.join("traces");
                    create_dir(&tdir)?;
                    let mut entries = Vec::new();
                    for (k, s) in rb.spaces.iter().enumerate() {
                        let values = mat_values(&s.basis)
                            .chain(mat_values(&s.reduced_terms[0]))
                            .chain(mat_values(&s.reduced_terms[1]))
                            .chain(s.reduced_rhs.iter().flatten().copied())
                            .collect::<Vec<_>>();
                        write_f64(&adir.join(format!("rb_{k}.f64")), values)?;
                        let label = s.target.label(arch);
                        write_text(&tdir.join(format!("{label}.csv")), &trace_csv(&s.trace))?;
                        entries.push(RbEntry {
                            target: s.target,
                            label,
                            dim: s.dim(),
                            status: s.status,
                            rhs_terms: s.reduced_rhs.len(),
                        });
                    }
                    Some(entries)
                }
                None => None,
            };
            let manifest = ArchetypeManifest {
                schema_version: SCHEMA_VERSION,
                spec: t.spec.clone(),
                n_dofs: arch.mesh.n_dofs(),
                n_interior: arch.interior.len(),
                ports,
                rb_options: t.rb_options,
                rb,
            };
            write_text(&adir.join("manifest.json"), &serde_json::to_string_pretty(&manifest).unwrap())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("library.json");
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: LibraryIndex = serde_json::from_str(&text).map_err(|e| Error::parse(&index_path, e))?;
        if index.schema_version != SCHEMA_VERSION {
            return Err(Error::parse(&index_path, format!("unsupported schema_version {}", index.schema_version)));
        }
        let mut lib = Library::new();
        for id in &index.archetypes {
            let adir = dir.join(id);
            let mpath = adir.join("manifest.json");
            let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            let manifest: ArchetypeManifest = serde_json::from_str(&text).map_err(|e| Error::parse(&mpath, e))?;
            if manifest.schema_version != SCHEMA_VERSION {
                return Err(Error::parse(&mpath, format!("unsupported schema_version {}", manifest.schema_version)));
            }
            let mesh = load_mesh(&adir.join("mesh.json"))?;
            let n = mesh.n_dofs();
            if n != manifest.n_dofs {
                return Err(Error::parse(&mpath, "mesh does not match the manifest"));
            }
            let mut spaces = Vec::new();
            for (j, p) in manifest.ports.iter().enumerate() {
                let path = adir.join(format!("modes_{j}.f64"));
                let values = read_f64(&path)?;
                let modes = take_mat(&values, &mut 0, p.dofs, p.modes, &path)?;
                spaces.push(PortSpace { modes, kind: p.kind });
            }
            let m: usize = manifest.ports.iter().map(|p| p.modes).sum();
            let path = adir.join("extensions.f64");
            let extensions = take_mat(&read_f64(&path)?, &mut 0, n, m, &path)?;
            let spec = manifest.spec.clone();
            let arch = Archetype::from_parts(id, mesh, spec.domain, spec.clamped_tags.clone(), spaces, extensions)?;
            if arch.interior.len() != manifest.n_interior {
                return Err(Error::parse(&mpath, "interior DoF count does not match the manifest"));
            }
            let rb = match &manifest.rb {
                Some(entries) => {
                    let mut spaces = Vec::new();
                    for (k, entry) in entries.iter().enumerate() {
                        let path = adir.join(format!("rb_{k}.f64"));
                        let values = read_f64(&path)?;
                        let mut at = 0;
                        let ni = arch.interior.len();
                        let d = entry.dim;
                        let basis = take_mat(&values, &mut at, ni, d, &path)?;
                        let t0 = take_mat(&values, &mut at, d, d, &path)?;
                        let t1 = take_mat(&values, &mut at, d, d, &path)?;
                        let mut reduced_rhs = Vec::new();
                        for _ in 0..entry.rhs_terms {
                            let c = take_mat(&values, &mut at, d, 1, &path)?;
                            reduced_rhs.push((0..d).map(|i| c[(i, 0)]).collect());
                        }
                        let tpath = adir.join("traces").join(format!("{}.csv", entry.label));
                        let trace = read_trace(&tpath)?;
                        spaces.push(RbSpace {
                            target: entry.target,
                            basis,
                            reduced_terms: [t0, t1],
                            reduced_rhs,
                            trace,
                            status: entry.status,
                        });
                    }
                    if spaces.iter().map(|s| s.target).collect::<Vec<_>>() != targets(&arch) {
                        return Err(Error::parse(&mpath, "reduced-basis targets do not match the archetype"));
                    }
                    let model = ReducedModel::build(&arch, &spaces)?;
                    Some(RbData { spaces, model })
                }
                None => None,
            };
            let rotational = match &spec.adaptive_port {
                Some(port) => {
                    let nu0 = spec
                        .reference_poisson_ratio
                        .ok_or_else(|| Error::parse(&mpath, "rotational archetype without reference_poisson_ratio"))?;
                    Some(RotationalSplit::build(&arch, port, nu0)?)
                }
                None => None,
            };
            lib.insert(TrainedArchetype {
                spec,
                arch,
                rb,
                rotational,
                rb_options: manifest.rb_options,
            });
        }
        Ok(lib)
    }
}

/// Reads a trace written by [`trace_csv`].
pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::parse(path, format!("line {}: malformed trace row", k + 1));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(bad());
        }
        let (e, nu) = cols[1].split_once(':').ok_or_else(bad)?;
        out.push(TraceRow {
            iteration: cols[0].parse().map_err(|_| bad())?,
            worst_e: e.parse().map_err(|_| bad())?,
            worst_nu: nu.parse().map_err(|_| bad())?,
            error: cols[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_csv_round_trip() {
        let rows = vec![
            TraceRow {
                iteration: 0,
                worst_e: 1.5e9,
                worst_nu: 0.25,
                error: 1.0,
            },
            TraceRow {
                iteration: 1,
                worst_e: 3e10,
                worst_nu: 0.4,
                error: 1.234567890123e-7,
            },
        ];
        let dir = std::env::temp_dir().join(format!("apcms_trace_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        std::fs::write(&path, trace_csv(&rows)).unwrap();
        assert_eq!(read_trace(&path).unwrap(), rows);
        std::fs::remove_dir_all(&dir).ok();
    }
}
