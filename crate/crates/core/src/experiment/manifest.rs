use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{write_json, Experiment, TOOL_NAME, TOOL_VERSION};
use crate::error::{Error, Result};
use crate::io::hash_path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputRecord {
    pub sha256: String,
    /// Whether a rerun must reproduce these bytes exactly.
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub experiment: Experiment,
    /// SHA-256 of every input file or directory, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, OutputRecord>,
    /// Wall-clock seconds; excluded from replay comparison.
    pub timings: BTreeMap<String, f64>,
    pub metrics: Value,
}

/// Manifest location for a run whose main output is `out`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn key(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Runs `exp` and writes its manifest next to the primary output.
pub fn execute(exp: &Experiment) -> Result<RunManifest> {
    let inputs = exp
        .inputs()
        .iter()
        .map(|p| Ok((key(p), hash_path(p)?)))
        .collect::<Result<_>>()?;
    let outcome = exp.run()?;
    let outputs = outcome
        .outputs
        .iter()
        .map(|(p, deterministic)| {
            Ok((
                key(p),
                OutputRecord {
                    sha256: hash_path(p)?,
                    deterministic: *deterministic,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let manifest = RunManifest {
        tool: TOOL_NAME.into(),
        version: TOOL_VERSION.into(),
        experiment: exp.clone(),
        inputs,
        outputs,
        timings: outcome.timings,
        metrics: outcome.metrics,
    };
    write_json(&manifest_path(exp.primary_output()), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub command: String,
    pub metrics_identical: bool,
    /// Top-level metric keys whose values differ.
    pub metric_differences: Vec<String>,
    /// Deterministic outputs whose bytes differ, by original path.
    pub output_differences: Vec<String>,
    pub replayed: RunManifest,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.metrics_identical && self.output_differences.is_empty()
    }
}

fn differing_keys(a: &Value, b: &Value) -> Vec<String> {
    match (a.as_object(), b.as_object()) {
        (Some(x), Some(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().filter(|k| x.get(*k) != y.get(*k)).cloned().collect()
        }
        _ if a != b => vec!["<root>".into()],
        _ => Vec::new(),
    }
}

/// Re-runs the experiment recorded at `manifest` with outputs written under
/// `scratch`, and compares metrics and deterministic outputs bit for bit.
/// Fails if any recorded input changed since the original run.
pub fn replay(manifest: &Path, scratch: &Path) -> Result<ReplayReport> {
    let original = load_manifest(manifest)?;
    for (path, hash) in &original.inputs {
        let now = hash_path(Path::new(path))?;
        if &now != hash {
            return Err(Error::HashMismatch {
                expected: hash.clone(),
                found: format!("{now} ({path})"),
            });
        }
    }
    std::fs::create_dir_all(scratch)?;
    let mut exp = original.experiment.clone();
    exp.redirect_outputs(scratch);
    let replayed = super::execute(&exp)?;

    let metric_differences = differing_keys(&original.metrics, &replayed.metrics);
    let mut output_differences = Vec::new();
    for (path, rec) in &original.outputs {
        let mut moved = PathBuf::from(path);
        super::redirect(&mut moved, scratch);
        let now = replayed.outputs.get(&key(&moved));
        if rec.deterministic && now.map(|n| &n.sha256) != Some(&rec.sha256) {
            output_differences.push(path.clone());
        }
    }
    Ok(ReplayReport {
        command: exp.name().into(),
        metrics_identical: metric_differences.is_empty(),
        metric_differences,
        output_differences,
        replayed,
    })
}
