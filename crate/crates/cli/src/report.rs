//! Structured JSON reports.
//!
//! A report file holds the deterministic `body`, its SHA-256, and a `runtime`
//! section with wall-clock times, thread count and output directory. Only the
//! body is hashed, so two runs of one config and seed hash identically.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    Warning,
    Error,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::Error => 1,
            Status::Warning => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    /// The resolved config with every default filled in, less the output
    /// directory.
    pub config: Value,
    /// The resolved integrand, including derived growth constants.
    pub integrand: Value,
    pub integrand_hash: String,
    pub solver_version: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(cfg: &RunConfig, w: Option<&filmrelax::StoredEnergyDensity>) -> Self {
        let mut config = serde_json::to_value(cfg).expect("config serializes");
        if let Some(out) = config.get_mut("output").and_then(Value::as_object_mut) {
            out.remove("dir");
        }
        Self {
            config,
            integrand: w.map_or(Value::Null, |w| serde_json::to_value(w).expect("integrand serializes")),
            integrand_hash: w.map_or_else(String::new, |w| w.hash()),
            solver_version: filmrelax::SOLVER_VERSION.to_string(),
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportBody {
    pub command: String,
    pub status: Status,
    pub warnings: Vec<String>,
    pub result: Value,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Runtime {
    pub seconds: f64,
    pub threads: usize,
    pub out_dir: String,
    /// Per-item timings that would break determinism inside the body.
    #[serde(skip_serializing_if = "Value::is_null")]
    pub timings: Value,
}

/// A finished command: body, runtime, and optional CSV extracts.
#[derive(Debug, Clone)]
pub struct Report {
    pub body: ReportBody,
    pub runtime: Runtime,
    /// `(file name, contents)` written with `--export csv`.
    pub csv: Vec<(String, String)>,
}

impl Report {
    pub fn new(command: &str, status: Status, warnings: Vec<String>, result: Value, provenance: Provenance) -> Self {
        Self {
            body: ReportBody {
                command: command.to_string(),
                status,
                warnings,
                result,
                provenance,
            },
            runtime: Runtime::default(),
            csv: Vec::new(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.body.status.exit_code()
    }

    /// Canonical text of the body; the hashed bytes.
    pub fn body_text(&self) -> String {
        serde_json::to_string_pretty(&self.body).expect("body serializes")
    }

    pub fn body_sha256(&self) -> String {
        hex::encode(Sha256::digest(self.body_text().as_bytes()))
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct File<'a> {
            body: &'a ReportBody,
            body_sha256: String,
            runtime: &'a Runtime,
        }
        let file = File {
            body: &self.body,
            body_sha256: self.body_sha256(),
            runtime: &self.runtime,
        };
        serde_json::to_string_pretty(&file).expect("report serializes") + "\n"
    }

    /// Writes `<dir>/<command>.json` and, when asked, the CSV extracts.
    pub fn write(&self, dir: &Path, csv: bool) -> Result<(), CliError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CliError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(format!("{}.json", self.body.command));
        std::fs::write(&path, self.to_json()).map_err(io(&path))?;
        if csv {
            for (name, text) in &self.csv {
                let path = dir.join(name);
                std::fs::write(&path, text).map_err(io(&path))?;
            }
        }
        Ok(())
    }
}
