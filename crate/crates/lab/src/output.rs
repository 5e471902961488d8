//! Artifact writers. Every file carries the config hash and the library
//! version, and is written to a temporary name first and then renamed.

use std::path::{Path, PathBuf};

use serde::Serialize;
use zsrl_core::feature_opt::TracePoint;

use crate::error::{LabError, LabResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Serialize)]
pub struct Stamped<'a, T: Serialize> {
    pub version: &'a str,
    pub config_hash: &'a str,
    #[serde(flatten)]
    pub body: &'a T,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> LabResult<()> {
    let err = |source| LabError::Write { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(err)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|source| LabError::Write { path: tmp.clone(), source })?;
    std::fs::rename(&tmp, path).map_err(err)
}

pub fn json_bytes<T: Serialize>(config_hash: &str, body: &T) -> LabResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(&Stamped { version: VERSION, config_hash, body })?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, config_hash: &str, body: &T) -> LabResult<PathBuf> {
    let path = dir.join(name);
    write_atomic(&path, &json_bytes(config_hash, body)?)?;
    Ok(path)
}

#[derive(Serialize)]
struct TraceRow<'a> {
    run: &'a str,
    step: usize,
    exact_loss: f64,
    orth_residual: f64,
    component: &'a str,
    config_hash: &'a str,
    version: &'a str,
}

/// Writes `trace.csv`; `runs` pairs a run label with its trace.
pub fn write_trace(dir: &Path, config_hash: &str, runs: &[(String, &[TracePoint])]) -> LabResult<PathBuf> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for (run, trace) in runs {
        for p in trace.iter() {
            writer.serialize(TraceRow {
                run,
                step: p.step,
                exact_loss: p.exact_loss,
                orth_residual: p.orth_residual,
                component: &p.component,
                config_hash,
                version: VERSION,
            })?;
        }
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| LabError::Write { path: dir.join("trace.csv"), source: std::io::Error::other(e.to_string()) })?;
    let path = dir.join("trace.csv");
    write_atomic(&path, &bytes)?;
    Ok(path)
}

pub fn write_report(dir: &Path, config_hash: &str, title: &str, body: &str) -> LabResult<PathBuf> {
    let text = format!("# {title}\n\n- version: {VERSION}\n- config hash: `{config_hash}`\n\n{body}");
    let path = dir.join("report.md");
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}
