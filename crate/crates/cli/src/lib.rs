//! Stage runner behind the `forge` binary.
//!
//! Each stage reads files under the work directory (plus its configured
//! external inputs), writes its outputs atomically and records a manifest
//! with input, parameter and output digests in `work_dir/manifests/`. A stage
//! whose manifest still matches is skipped.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use thiserror::Error;

pub mod config;
pub mod manifest;
pub mod stages;

pub use config::{Config, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("missing input: {0} is not configured")]
    NotConfigured(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, #[source] std::io::Error),

    #[error(transparent)]
    Core(#[from] intentkg::Error),
}

impl CliError {
    pub fn from_io(path: &Path, err: std::io::Error) -> Self {
        match err.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingInput(path.to_path_buf()),
            _ => CliError::Io(path.to_path_buf(), err),
        }
    }

    /// 2 for missing inputs, 3 for invalid configuration or data, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use intentkg::Error as E;
        match self {
            CliError::MissingInput(_) | CliError::NotConfigured(_) => 2,
            CliError::Config(_) | CliError::Validation(_) => 3,
            CliError::Io(..) => 1,
            CliError::Core(e) => match e {
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
                E::Json(_) | E::Invalid(_) | E::Dimension { .. } | E::Reference(_) | E::Version { .. } => 3,
                _ => 1,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, ValueEnum)]
pub enum Stage {
    Ingest,
    Generate,
    AnnotateServe,
    Populate,
    Mine,
    Conceptualize,
    Assemble,
    Embed,
    Receval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Ingest,
        Stage::Generate,
        Stage::AnnotateServe,
        Stage::Populate,
        Stage::Mine,
        Stage::Conceptualize,
        Stage::Assemble,
        Stage::Embed,
        Stage::Receval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Generate => "generate",
            Stage::AnnotateServe => "annotate-serve",
            Stage::Populate => "populate",
            Stage::Mine => "mine",
            Stage::Conceptualize => "conceptualize",
            Stage::Assemble => "assemble",
            Stage::Embed => "embed",
            Stage::Receval => "receval",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ran { outputs: Vec<PathBuf> },
    UpToDate,
}

/// Writes a text file atomically, creating parent directories.
pub fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    intentkg::jsonl::write_atomic(path, |w| {
        use std::io::Write;
        w.write_all(body.as_bytes()).map_err(|e| intentkg::Error::io(path, e))
    })?;
    Ok(())
}

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    Ok(())
}

/// Runs one stage, skipping it when its manifest is current and `force` is off.
pub fn run_stage(stage: Stage, cfg: &Config, force: bool) -> Result<Outcome, CliError> {
    let plan = stages::plan(stage, cfg)?;
    for p in &plan.inputs {
        if !p.is_file() {
            return Err(CliError::MissingInput(p.clone()));
        }
    }
    let mut inputs = plan.inputs.clone();
    inputs.extend(plan.optional.iter().filter(|p| p.is_file()).cloned());
    let input_digests = manifest::digest_all(&inputs)?;
    let params = manifest::params_digest(&plan.params);

    if plan.memoize && !force {
        if let Some(m) = manifest::load(&cfg.work_dir, stage.name()) {
            if m.is_current(&params, &input_digests) {
                log::info!("{}: up to date", stage.name());
                return Ok(Outcome::UpToDate);
            }
        }
    }

    std::fs::create_dir_all(&cfg.work_dir).map_err(|e| CliError::Io(cfg.work_dir.clone(), e))?;
    log::info!("{}: running", stage.name());
    let outputs = stages::execute(stage, cfg)?;
    let m = manifest::Manifest {
        stage: stage.name().to_string(),
        params,
        inputs: input_digests,
        outputs: manifest::digest_all(&outputs)?,
    };
    manifest::store(&cfg.work_dir, &m)?;
    Ok(Outcome::Ran { outputs })
}
