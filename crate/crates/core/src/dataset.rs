//! On-disk datasets.
//!
//! A dataset directory holds one DIMACS file per instance named
//! `<family>_<size>_<index>.cnf` (size is `n` for 3-SAT and the vertex count
//! for triangle finding), an optional companion `<same stem>.solutions` in
//! solution-file format, and `manifest.json` recording how it was generated.

use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{parse_dimacs, parse_solutions, write_dimacs, write_solutions, Assignment, CnfFormula, ParseError};
use crate::generate::{encode_3clique, gen_3sat, gen_er_graph, instance_rng, GenError, ThreeSatMode};
use crate::oracle::enumerate_solutions;
use crate::train::{SolutionMode, TrainError, TrainExample};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("{path}: invalid manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("empty size range {0}..{1}")]
    EmptyRange(usize, usize),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("no .cnf files in {0}")]
    Empty(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How the instances of a dataset were produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum FamilyParams {
    #[serde(rename = "3sat")]
    ThreeSat {
        min_vars: usize,
        max_vars: usize,
        /// `threshold` or `ratio:R`.
        mode: String,
    },
    Clique { min_vertices: usize, max_vertices: usize },
}

impl FamilyParams {
    pub fn family(&self) -> &'static str {
        match self {
            FamilyParams::ThreeSat { .. } => "3sat",
            FamilyParams::Clique { .. } => "clique",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cnf: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solutions: Option<String>,
    pub num_vars: usize,
    pub num_clauses: usize,
    /// Number of enumerated solutions, when enumeration ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_solutions: Option<usize>,
    /// Whether enumeration stopped at the cap.
    #[serde(default)]
    pub truncated: bool,
    /// Graph edges (1-indexed vertex pairs) of a triangle-finding instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(usize, usize)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: FamilyParams,
    pub seed: u64,
    pub count: usize,
    /// Enumeration cap used for `.solutions` files; absent if none were
    /// written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution_cap: Option<usize>,
    pub instances: Vec<ManifestEntry>,
}

/// One generated instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedInstance {
    pub index: usize,
    /// `n` for 3-SAT, `v` for triangle finding.
    pub size: usize,
    pub formula: CnfFormula,
    pub edges: Option<Vec<(usize, usize)>>,
}

fn check_range(r: &RangeInclusive<usize>) -> Result<(), DatasetError> {
    if r.is_empty() {
        return Err(DatasetError::EmptyRange(*r.start(), *r.end()));
    }
    Ok(())
}

/// 3-SAT instances with `n` drawn uniformly from `vars` per instance.
/// Instance `i` uses stream `(seed, i)` for both its size and its clauses.
pub fn generate_3sat(
    vars: RangeInclusive<usize>,
    mode: ThreeSatMode,
    count: usize,
    seed: u64,
) -> Result<Vec<GeneratedInstance>, DatasetError> {
    check_range(&vars)?;
    (0..count)
        .map(|index| {
            let mut rng = instance_rng(seed, index as u64);
            let n = rng.gen_range(vars.clone());
            Ok(GeneratedInstance {
                index,
                size: n,
                formula: gen_3sat(n, mode, &mut rng)?,
                edges: None,
            })
        })
        .collect()
}

/// Triangle-finding instances on Erdős–Rényi graphs with `v` drawn
/// uniformly from `vertices`.
pub fn generate_clique(vertices: RangeInclusive<usize>, count: usize, seed: u64) -> Result<Vec<GeneratedInstance>, DatasetError> {
    check_range(&vertices)?;
    (0..count)
        .map(|index| {
            let mut rng = instance_rng(seed, index as u64);
            let v = rng.gen_range(vertices.clone());
            let graph = gen_er_graph(v, &mut rng)?;
            let (formula, _) = encode_3clique(&graph);
            Ok(GeneratedInstance {
                index,
                size: v,
                formula,
                edges: Some(graph.edges().collect()),
            })
        })
        .collect()
}

/// Writes instances, optional `.solutions` companions (enumerated up to
/// `solution_cap`), and the manifest into `dir`.
pub fn write_dataset(
    dir: &Path,
    params: FamilyParams,
    seed: u64,
    instances: &[GeneratedInstance],
    solution_cap: Option<usize>,
) -> Result<Manifest, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let family = params.family();
    let mut entries = Vec::with_capacity(instances.len());
    for inst in instances {
        let stem = format!("{family}_{}_{}", inst.size, inst.index);
        let cnf = format!("{stem}.cnf");
        let path = dir.join(&cnf);
        fs::write(&path, write_dimacs(&inst.formula)).map_err(io_err(&path))?;
        let mut entry = ManifestEntry {
            cnf,
            solutions: None,
            num_vars: inst.formula.num_vars(),
            num_clauses: inst.formula.num_clauses(),
            num_solutions: None,
            truncated: false,
            edges: inst.edges.clone(),
        };
        if let Some(cap) = solution_cap {
            let e = enumerate_solutions(&inst.formula, cap);
            let name = format!("{stem}.solutions");
            let path = dir.join(&name);
            fs::write(&path, write_solutions(&e.solutions)).map_err(io_err(&path))?;
            entry.solutions = Some(name);
            entry.num_solutions = Some(e.solutions.len());
            entry.truncated = e.truncated;
        }
        entries.push(entry);
    }
    let manifest = Manifest {
        params,
        seed,
        count: instances.len(),
        solution_cap,
        instances: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

/// One loaded instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub name: String,
    pub formula: CnfFormula,
    /// Contents of the companion `.solutions` file, if any.
    pub solutions: Option<Vec<Assignment>>,
    /// Whether the companion list is known to be incomplete.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Option<Manifest>,
    pub instances: Vec<Instance>,
}

fn read(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn load_instance(dir: &Path, cnf: &str, truncated: bool) -> Result<Instance, DatasetError> {
    let path = dir.join(cnf);
    let formula = parse_dimacs(&read(&path)?).map_err(|source| DatasetError::Parse { path: path.clone(), source })?;
    let sol_path = path.with_extension("solutions");
    let solutions = if sol_path.exists() {
        let text = read(&sol_path)?;
        Some(parse_solutions(&text, formula.num_vars()).map_err(|source| DatasetError::Parse { path: sol_path, source })?)
    } else {
        None
    };
    Ok(Instance {
        name: cnf.to_string(),
        formula,
        solutions,
        truncated,
    })
}

impl Dataset {
    /// Loads the instances listed in the manifest, or every `.cnf` file in
    /// name order when there is no manifest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let manifest: Manifest = serde_json::from_str(&read(&manifest_path)?).map_err(|source| DatasetError::Manifest {
                path: manifest_path.clone(),
                source,
            })?;
            let instances = manifest
                .instances
                .iter()
                .map(|e| load_instance(dir, &e.cnf, e.truncated))
                .collect::<Result<_, _>>()?;
            return Ok(Dataset {
                manifest: Some(manifest),
                instances,
            });
        }
        let mut names: Vec<String> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".cnf"))
            .collect();
        if names.is_empty() {
            return Err(DatasetError::Empty(dir.to_path_buf()));
        }
        names.sort();
        let instances = names
            .iter()
            .map(|n| load_instance(dir, n, false))
            .collect::<Result<_, _>>()?;
        Ok(Dataset {
            manifest: None,
            instances,
        })
    }

    pub fn formulas(&self) -> Vec<CnfFormula> {
        self.instances.iter().map(|i| i.formula.clone()).collect()
    }

    /// Training examples: a solution per instance taken from its
    /// `.solutions` file when one exists, otherwise from enumeration.
    /// Instances without solutions are dropped. Instance `i` draws from
    /// stream `(seed, i)` in uniform mode.
    pub fn examples(&self, mode: SolutionMode, seed: u64, cap: usize) -> Result<Vec<TrainExample>, DatasetError> {
        let mut out = Vec::new();
        for (i, inst) in self.instances.iter().enumerate() {
            let listed = inst.solutions.as_ref().filter(|_| !(inst.truncated && mode == SolutionMode::Uniform));
            let enumerated;
            let sols: &[Assignment] = match listed {
                Some(s) => s,
                None => {
                    enumerated = enumerate_solutions(&inst.formula, cap).solutions;
                    &enumerated
                }
            };
            let pick = match mode {
                SolutionMode::First => sols.first(),
                SolutionMode::Uniform => sols.choose(&mut instance_rng(seed, i as u64)),
            };
            if let Some(s) = pick {
                out.push(TrainExample::new(inst.formula.clone(), s.clone())?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_reproducible_and_in_range() {
        let a = generate_3sat(5..=9, ThreeSatMode::FixedRatio(3.0), 20, 7).unwrap();
        let b = generate_3sat(5..=9, ThreeSatMode::FixedRatio(3.0), 20, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|i| (5..=9).contains(&i.size) && i.formula.num_vars() == i.size));
        let sizes: std::collections::BTreeSet<_> = a.iter().map(|i| i.size).collect();
        assert!(sizes.len() > 1);
        // Instance i does not depend on how many instances come before it.
        let tail = generate_3sat(5..=9, ThreeSatMode::FixedRatio(3.0), 25, 7).unwrap();
        assert_eq!(&tail[..20], &a[..]);
    }

    #[test]
    fn empty_range_is_rejected() {
        #[allow(clippy::reversed_empty_ranges)]
        let r = 9..=5;
        assert!(matches!(
            generate_3sat(r, ThreeSatMode::Threshold, 1, 0),
            Err(DatasetError::EmptyRange(9, 5))
        ));
    }

    #[test]
    fn write_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let inst = generate_clique(4..=6, 5, 3).unwrap();
        let params = FamilyParams::Clique {
            min_vertices: 4,
            max_vertices: 6,
        };
        let manifest = write_dataset(dir.path(), params, 3, &inst, Some(1000)).unwrap();
        assert_eq!(manifest.instances.len(), 5);
        assert!(manifest.instances[0].cnf.starts_with("clique_"));
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded.manifest.as_ref(), Some(&manifest));
        for (l, g) in loaded.instances.iter().zip(&inst) {
            assert_eq!(l.formula, g.formula);
            let sols = l.solutions.as_ref().unwrap();
            assert_eq!(sols, &enumerate_solutions(&g.formula, 1000).solutions);
        }
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("\"family\": \"clique\""));
    }

    #[test]
    fn loads_plain_directories_and_builds_examples() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.cnf"), "p cnf 2 1\n1 2 0\n").unwrap();
        fs::write(dir.path().join("a.cnf"), "p cnf 1 2\n1 0\n-1 0\n").unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert!(ds.manifest.is_none());
        assert_eq!(ds.instances[0].name, "a.cnf");
        let ex = ds.examples(SolutionMode::First, 0, 100).unwrap();
        assert_eq!(ex.len(), 1, "the unsatisfiable instance is dropped");
        assert_eq!(ex[0].solution().values(), &[false, true]);
    }
}
