//! Output directory, run manifest and artifact writers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gmy_core::systems::{Point, ReferenceDisk, SystemDescriptor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{io_err, CliError, RunConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

/// Empirical constants resolved by the phases run so far.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConstants {
    pub p: Option<Vec<f64>>,
    pub delta0: Option<f64>,
    pub n0: Option<usize>,
    pub theta_hat: Option<f64>,
    pub c2_hat: Option<f64>,
    pub c5_hat: Option<f64>,
    pub p_hat: Option<usize>,
    pub eta_hat: Option<f64>,
    pub sigma1: Option<f64>,
    pub sigma2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_hash: String,
    pub config_hash: String,
    pub tool_version: String,
    pub system: String,
    pub seed: u64,
    pub constants: ResolvedConstants,
    /// Wall-clock seconds of the last run of each phase.
    pub phases: BTreeMap<String, f64>,
    /// Artifact file name to the phase that wrote it.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig) -> Self {
        let config_hash = cfg.hash();
        let manifest_hash = hex::encode(Sha256::digest(format!("gmylab/{TOOL_VERSION}/{config_hash}").as_bytes()));
        RunManifest {
            manifest_hash,
            config_hash,
            tool_version: TOOL_VERSION.to_string(),
            system: cfg.system.name.clone(),
            seed: cfg.run.seed,
            constants: ResolvedConstants::default(),
            phases: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }
}

/// One output directory bound to one config.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub manifest: RunManifest,
    phase: String,
    started: Instant,
    sys: Option<SystemDescriptor>,
}

impl Run {
    /// Opens (or creates) the output directory for `phase`. A directory that
    /// already holds a manifest of a different config is refused.
    pub fn open(cfg: &RunConfig, phase: &str) -> Result<Run, CliError> {
        let out = cfg.run.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        let fresh = RunManifest::new(cfg);
        let path = out.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let old: RunManifest = read_json(&path)?;
            if old.manifest_hash != fresh.manifest_hash {
                return Err(CliError::Config {
                    field: "run.out".into(),
                    line: None,
                    message: format!(
                        "{} holds artifacts of another run (manifest {}); use a fresh output directory",
                        out.display(),
                        &old.manifest_hash[..12]
                    ),
                });
            }
            old
        } else {
            fresh
        };
        let run = Run { cfg: cfg.clone(), out, manifest, phase: phase.to_string(), started: Instant::now(), sys: None };
        // Without the output directory, like the config hash.
        let mut portable = cfg.clone();
        portable.run.out = None;
        run.write_raw("config.toml", &portable.to_toml())?;
        Ok(run)
    }

    pub fn hash(&self) -> &str {
        &self.manifest.manifest_hash
    }

    /// The configured system, built once per command.
    pub fn system(&mut self) -> Result<SystemDescriptor, CliError> {
        if let Some(s) = &self.sys {
            return Ok(s.clone());
        }
        let sys = SystemDescriptor::from_spec(&self.cfg.system.name, &self.cfg.system.params).map_err(|e| match e {
            gmy_core::Error::Precondition(m) => CliError::Config { field: "system".into(), line: None, message: m },
            other => CliError::Numeric(other),
        })?;
        if let Some(v) = &sys.verified {
            self.manifest.constants.sigma1 = Some(v.sigma1);
            self.manifest.constants.sigma2 = Some(v.sigma2);
        }
        self.write_json("system.json", &sys)?;
        self.sys = Some(sys.clone());
        Ok(sys)
    }

    pub fn disk(&self, sys: &SystemDescriptor) -> Result<ReferenceDisk, CliError> {
        let c = self.cfg.disk_center();
        let g = &self.cfg.geometry;
        Ok(if sys.dim == 1 {
            ReferenceDisk::interval(c[0], g.disk_radius)
        } else {
            ReferenceDisk::cu_segment(sys, Point::new2(c[0], c[1]), g.disk_radius, g.max_gap)?
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_raw(&self, name: &str, body: &str) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))
    }

    fn record(&mut self, name: &str) {
        self.manifest.artifacts.insert(name.to_string(), self.phase.clone());
    }

    /// CSV artifact; the first line carries the manifest hash.
    pub fn write_csv(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        self.write_raw(name, &format!("# manifest_hash={}\n{body}", self.manifest.manifest_hash))?;
        self.record(name);
        Ok(())
    }

    /// JSONL artifact streamed record by record; the first line carries the manifest hash.
    pub fn write_records<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<(), CliError> {
        use std::io::Write;
        let p = self.path(name);
        let f = fs::File::create(&p).map_err(|e| io_err(&p, e))?;
        let mut w = std::io::BufWriter::new(f);
        let head = serde_json::json!({ "manifest_hash": self.manifest.manifest_hash });
        writeln!(w, "{head}").map_err(|e| io_err(&p, e))?;
        for r in records {
            serde_json::to_writer(&mut w, r).map_err(|e| CliError::Io(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| io_err(&p, e))?;
        }
        w.flush().map_err(|e| io_err(&p, e))?;
        self.record(name);
        Ok(())
    }

    /// JSON artifact; objects gain a `manifest_hash` field, other values are wrapped.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut v = serde_json::to_value(value).map_err(|e| CliError::Io(e.to_string()))?;
        let h = serde_json::Value::String(self.manifest.manifest_hash.clone());
        match v.as_object_mut() {
            Some(m) => {
                m.insert("manifest_hash".into(), h);
            }
            None => v = serde_json::json!({ "manifest_hash": h, "value": v }),
        }
        let body = serde_json::to_string_pretty(&v).map_err(|e| CliError::Io(e.to_string()))?;
        self.write_raw(name, &(body + "\n"))?;
        self.record(name);
        Ok(())
    }

    /// Records the phase time and saves the manifest.
    pub fn finish(&mut self) -> Result<(), CliError> {
        let secs = self.started.elapsed().as_secs_f64();
        self.manifest.phases.insert(self.phase.clone(), secs);
        let body = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Io(e.to_string()))?;
        self.write_raw(MANIFEST_FILE, &(body + "\n"))
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let s = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&s).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
