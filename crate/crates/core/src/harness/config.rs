use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationMethod;
use crate::backends::sim::{ScriptedWorld, Simulator};
use crate::backends::wire::{WireBackend, WireConfig};
use crate::backends::{Backends, ChatBackend, Role};
use crate::baselines::Strategy;
use crate::baselines::StrategyName;
use crate::domain::{Problem, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::Pricing;
use crate::template::{PromptSet, Template};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Sim,
    Wire,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sim" => Ok(BackendKind::Sim),
            "wire" => Ok(BackendKind::Wire),
            other => Err(format!("unknown backend {other:?} (expected sim or wire)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Simulator world file. Takes precedence over `world`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_world: Option<PathBuf>,
    /// Inline simulator world.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world: Option<ScriptedWorld>,
    /// Wire client settings shared by all roles.
    pub wire: WireConfig,
    /// Per-role model names, overriding `wire.model`.
    pub models: BTreeMap<Role, String>,
    /// Per-role wire settings, replacing `wire` entirely for that role.
    pub overrides: BTreeMap<Role, WireConfig>,
}

impl BackendConfig {
    pub fn world(&self) -> Result<ScriptedWorld> {
        match (&self.sim_world, &self.world) {
            (Some(path), _) => ScriptedWorld::from_file(path),
            (None, Some(world)) => {
                world.validate()?;
                Ok(world.clone())
            }
            (None, None) => Ok(ScriptedWorld::default()),
        }
    }

    pub fn wire_for(&self, role: Role) -> WireConfig {
        let mut cfg = self.overrides.get(&role).cloned().unwrap_or_else(|| self.wire.clone());
        if let Some(model) = self.models.get(&role) {
            cfg.model = model.clone();
        }
        cfg
    }

    pub fn build(&self, problems: &[Problem], seed: u64) -> Result<Backends> {
        match self.kind {
            BackendKind::Sim => {
                let sim = Simulator::new(self.world()?, seed).with_problems(problems);
                Ok(Backends::uniform(Arc::new(sim)))
            }
            BackendKind::Wire => {
                let make = |role| -> Result<Arc<dyn ChatBackend>> {
                    let cfg = self.wire_for(role);
                    if cfg.model.is_empty() {
                        return Err(Error::Config(format!("no model configured for the {role:?} role")));
                    }
                    Ok(Arc::new(WireBackend::new(cfg)?))
                };
                Ok(Backends {
                    generator: make(Role::Generator)?,
                    verifier: make(Role::Verifier)?,
                    iterator: make(Role::Iterator)?,
                    comparator: make(Role::Comparator)?,
                })
            }
        }
    }
}

/// Everything a run needs. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    /// JSON Lines dataset.
    pub dataset: PathBuf,
    pub strategy: Strategy,
    /// Aggregations evaluated on every final population.
    pub aggregations: Vec<AggregationMethod>,
    pub run: RunConfig,
    pub backend: BackendConfig,
    /// Prompt template overrides by name (`generate`, `verify`, ...).
    pub templates: BTreeMap<String, PathBuf>,
    pub out: PathBuf,
    pub checkpoints: bool,
    /// Problems skipped from the start of the dataset.
    pub offset: usize,
    /// Most problems run after the offset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    pub pricing: Pricing,
    /// Initial populations to start from instead of sampling new ones.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_population: Option<PathBuf>,
    /// Write the initial populations to `{out}/initial_population.jsonl`.
    pub export_initial_population: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            strategy: Strategy::new(StrategyName::Prism),
            aggregations: vec![AggregationMethod::Majority, AggregationMethod::PrmScore],
            run: RunConfig::default(),
            backend: BackendConfig::default(),
            templates: BTreeMap::new(),
            out: PathBuf::from("prism-out"),
            checkpoints: true,
            offset: 0,
            limit: None,
            pricing: Pricing::default(),
            initial_population: None,
            export_initial_population: false,
        }
    }
}

impl HarnessConfig {
    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.out);
        if let Some(p) = self.backend.sim_world.as_mut() {
            fix(p);
        }
        if let Some(p) = self.initial_population.as_mut() {
            fix(p);
        }
        self.templates.values_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.strategy.validate(self.run.n)?;
        if self.aggregations.is_empty() {
            return Err(Error::Config("at least one aggregation method is required".into()));
        }
        let mut files = vec![("dataset", &self.dataset)];
        if let Some(p) = &self.backend.sim_world {
            files.push(("sim_world", p));
        }
        if let Some(p) = &self.initial_population {
            files.push(("initial_population", p));
        }
        for (name, path) in self.templates.iter().map(|(k, v)| (k.as_str(), v)) {
            files.push((name, path));
        }
        for (name, path) in files {
            if !path.is_file() {
                return Err(Error::Config(format!("{name}: {} does not exist", path.display())));
            }
        }
        self.backend.world()?;
        self.prompts()?;
        Ok(())
    }

    /// Default prompts with the configured overrides applied and checked.
    pub fn prompts(&self) -> Result<PromptSet> {
        let mut prompts = PromptSet::default();
        for (name, path) in &self.templates {
            let slot = prompts
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("unknown template {name:?}")))?;
            *slot = Template::from_file(path)?;
        }
        prompts.validate()?;
        Ok(prompts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c: HarnessConfig = serde_json::from_str(r#"{"dataset": "d.jsonl", "backend": {"kind": "sim"}}"#).unwrap();
        assert_eq!(c.run, RunConfig::default());
        assert_eq!(c.strategy.name, StrategyName::Prism);
        assert!(c.checkpoints);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<HarnessConfig>(r#"{"datset": "d"}"#).is_err());
        assert!(serde_json::from_str::<HarnessConfig>(r#"{"run": {"N": 4}}"#).is_err());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"dataset": "d.jsonl", "out": "/abs/out"}"#).unwrap();
        let c = HarnessConfig::from_file(&path).unwrap();
        assert_eq!(c.dataset, dir.path().join("d.jsonl"));
        assert_eq!(c.out, PathBuf::from("/abs/out"));
        assert!(c.validate().is_err());
        std::fs::write(dir.path().join("d.jsonl"), "").unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn role_models_override_shared_wire_settings() {
        let c: HarnessConfig = serde_json::from_str(
            r#"{"backend": {"kind": "wire", "wire": {"model": "g"}, "models": {"verifier": "v"}}}"#,
        )
        .unwrap();
        assert_eq!(c.backend.wire_for(Role::Generator).model, "g");
        assert_eq!(c.backend.wire_for(Role::Verifier).model, "v");
    }

    #[test]
    fn template_overrides_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("v.txt");
        std::fs::write(&t, "{problem} {bogus}").unwrap();
        let mut c = HarnessConfig::default();
        c.templates.insert("verify".into(), t.clone());
        assert!(c.prompts().is_err());
        std::fs::write(&t, "{problem}\n{tagged_steps}\n{final_answer}").unwrap();
        c.prompts().unwrap();
        c.templates.insert("nope".into(), t);
        assert!(c.prompts().is_err());
    }
}
