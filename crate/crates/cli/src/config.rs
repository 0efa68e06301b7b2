//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid by
//! command-line flags.

use std::path::{Path, PathBuf};

use reflectiva::engine::PipelineConfig;
use reflectiva::remote::RemoteConfig;
use serde::Deserialize;

use crate::{BackendKind, CliError, GlobalArgs};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub kb_path: Option<PathBuf>,
    pub index_path: Option<PathBuf>,
    pub dataset_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub backend: Option<BackendKind>,
    /// Mock backend script.
    pub script_path: Option<PathBuf>,
    pub remote: Option<RemoteConfig>,
    /// Separate service for re-ranking, judging, annotation and embedding;
    /// defaults to `remote`.
    pub services: Option<RemoteConfig>,
    pub pipeline: Option<PipelineConfig>,
    pub rel_tol: Option<f64>,
}

/// Resolved configuration for one command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub kb_path: Option<PathBuf>,
    pub index_path: Option<PathBuf>,
    pub dataset_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub backend: BackendKind,
    pub script_path: Option<PathBuf>,
    pub remote: RemoteConfig,
    pub services: RemoteConfig,
    pub pipeline: PipelineConfig,
    pub rel_tol: f64,
}

fn resolve(base: Option<&Path>, p: Option<PathBuf>) -> Option<PathBuf> {
    match (base, p) {
        (Some(b), Some(p)) if p.is_relative() => Some(b.join(p)),
        (_, p) => p,
    }
}

impl RunConfig {
    pub fn load(args: &GlobalArgs) -> Result<Self, CliError> {
        let (file, base) = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                let file: FileConfig =
                    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                (file, path.parent().map(Path::to_path_buf))
            }
            None => (FileConfig::default(), None),
        };
        let base = base.as_deref();
        let mut remote = file.remote.clone().unwrap_or_default().with_env_override();
        if let Some(e) = &args.endpoint {
            remote.endpoint = e.clone();
        }
        let services = file.services.clone().unwrap_or_else(|| remote.clone());
        let seed = args.seed.or(file.seed).unwrap_or(0);
        let mut pipeline = file.pipeline.clone().unwrap_or_default();
        pipeline.seed = seed;
        let cfg = RunConfig {
            kb_path: args.kb.clone().or(resolve(base, file.kb_path)),
            index_path: args.index.clone().or(resolve(base, file.index_path)),
            dataset_path: args.dataset.clone().or(resolve(base, file.dataset_path)),
            output_dir: args.out.clone().or(resolve(base, file.output_dir)).unwrap_or_else(|| PathBuf::from("out")),
            seed,
            jobs: args.jobs.or(file.jobs),
            backend: args.backend.or(file.backend).unwrap_or(BackendKind::Mock),
            script_path: args.script.clone().or(resolve(base, file.script_path)),
            remote,
            services,
            pipeline,
            rel_tol: args.rel_tol.or(file.rel_tol).unwrap_or(reflectiva::eval::DEFAULT_REL_TOL),
        };
        if !(cfg.rel_tol > 0.0 && cfg.rel_tol < 1.0) {
            return Err(CliError::config(format!("rel_tol must be in (0, 1), got {}", cfg.rel_tol)));
        }
        cfg.pipeline.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn require<'a>(&self, p: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path, CliError> {
        let p = p.as_deref().ok_or_else(|| CliError::config(format!("no {what} given (use {flag} or the config file)")))?;
        if !p.exists() {
            return Err(CliError::config(format!("{what} {} does not exist", p.display())));
        }
        Ok(p)
    }
}
