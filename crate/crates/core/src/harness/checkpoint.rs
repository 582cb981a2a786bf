//! Per-problem checkpoint files.
//!
//! Layout under the output directory:
//!
//! ```text
//! checkpoints/<problem>/iter_000.json   initial population
//! checkpoints/<problem>/iter_001.json   after iteration 1
//! ...
//! checkpoints/<problem>/final.json      aggregation results
//! ```
//!
//! Each file carries the calls issued while producing it, so token totals can
//! be recomputed from checkpoints alone.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::aggregate::AggregateResult;
use crate::backends::CallRecord;
use crate::engine::{IterationRecord, Population};
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationCheckpoint {
    pub schema_version: u32,
    pub problem_id: String,
    pub iteration: usize,
    pub population: Population,
    /// Engine log for this iteration (PRISM only).
    pub record: Option<IterationRecord>,
    /// Slot ancestry for this iteration; empty for the initial population.
    pub sources: Vec<usize>,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalCheckpoint {
    pub schema_version: u32,
    pub problem_id: String,
    /// The final population as aggregated (scored when a score-based vote
    /// needed it).
    pub population: Population,
    pub aggregates: Vec<AggregateResult>,
    pub calls: Vec<CallRecord>,
}

/// Checkpoints restored for one problem.
#[derive(Debug, Clone, Default)]
pub struct Restored {
    pub iterations: Vec<IterationCheckpoint>,
    pub final_state: Option<FinalCheckpoint>,
}

pub struct ProblemDir {
    path: PathBuf,
}

/// Directory name for a problem id: the id itself when it is filesystem
/// safe, otherwise a sanitized form with a hash suffix.
pub fn dir_name(problem_id: &str) -> String {
    let safe: String = problem_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    if safe == problem_id && !safe.starts_with('.') && !safe.is_empty() {
        safe
    } else {
        format!("{safe}-{:016x}", crate::rng::stream_seed(0, problem_id, 0, 0, "dir"))
    }
}

impl ProblemDir {
    pub fn new(out: &Path, problem_id: &str) -> Self {
        Self {
            path: out.join("checkpoints").join(dir_name(problem_id)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn iteration_path(&self, t: usize) -> PathBuf {
        self.path.join(format!("iter_{t:03}.json"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.path.join("final.json")
    }

    pub fn write_iteration(&self, checkpoint: &IterationCheckpoint) -> Result<()> {
        write_atomic(&self.iteration_path(checkpoint.iteration), checkpoint)
    }

    pub fn write_final(&self, checkpoint: &FinalCheckpoint) -> Result<()> {
        write_atomic(&self.final_path(), checkpoint)
    }

    /// Removes every checkpoint of this problem.
    pub fn clear(&self) -> Result<()> {
        match std::fs::remove_dir_all(&self.path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }

    /// Loads the contiguous run of iteration checkpoints starting at 0 and,
    /// when the run is complete, the final checkpoint. Any file that fails
    /// to parse or disagrees with the expected shape is an error.
    pub fn restore(&self, problem_id: &str, n: usize, t_max: usize) -> Result<Restored> {
        let mut restored = Restored::default();
        for t in 0..=t_max {
            let path = self.iteration_path(t);
            if !path.exists() {
                break;
            }
            let cp: IterationCheckpoint = read_json(&path)?;
            let bad = |message: String| Error::Checkpoint {
                path: path.clone(),
                message,
            };
            if cp.schema_version != CHECKPOINT_SCHEMA {
                return Err(bad(format!("schema version {}", cp.schema_version)));
            }
            if cp.problem_id != problem_id || cp.population.problem_id != problem_id {
                return Err(bad(format!("belongs to problem {:?}", cp.problem_id)));
            }
            if cp.iteration != t || cp.population.iteration != t {
                return Err(bad(format!("expected iteration {t}, found {}", cp.iteration)));
            }
            if cp.population.len() != n || (t > 0 && cp.sources.len() != n) {
                return Err(bad(format!("population width differs from {n}")));
            }
            restored.iterations.push(cp);
        }
        if self.iteration_path(t_max + 1).exists() {
            return Err(Error::Checkpoint {
                path: self.iteration_path(t_max + 1),
                message: format!("run has more than {t_max} iterations"),
            });
        }
        let final_path = self.final_path();
        if final_path.exists() {
            if restored.iterations.len() != t_max + 1 {
                return Err(Error::Checkpoint {
                    path: final_path,
                    message: "final checkpoint without a complete iteration chain".into(),
                });
            }
            let fin: FinalCheckpoint = read_json(&final_path)?;
            if fin.schema_version != CHECKPOINT_SCHEMA || fin.problem_id != problem_id {
                return Err(Error::Checkpoint {
                    path: final_path,
                    message: "schema or problem mismatch".into(),
                });
            }
            restored.final_state = Some(fin);
        }
        Ok(restored)
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes through a temporary file so an interrupted write never leaves a
/// truncated checkpoint behind.
pub(crate) fn write_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string(value)?;
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
